import numpy as np
import pytest

from propgcn.data import (
    build_proposals,
    load_dataset,
    pool_proposal_feature,
    read_external_scores,
    read_ground_truth,
)
from propgcn.errors import ConfigError
from propgcn.graph import SURROUNDING, GraphConfig, build_graph
from propgcn.heads import BACKGROUND, FOREGROUND, INCOMPLETE, label_samples
from propgcn.intervals import tiou
from propgcn.synthetic import SyntheticSpec, external_scores, generate_synthetic, generate_videos, prototypes


class TestSyntheticSpec:
    def test_feature_dim_must_fit_blocks(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(num_classes=5, feature_dim=6)

    def test_yaml_round_trip(self, tmp_path):
        spec = SyntheticSpec(num_videos=3, streams=("rgb",), ambiguity=0.25)
        path = tmp_path / "spec.yaml"
        path.write_text(spec.to_yaml())
        assert SyntheticSpec.from_yaml(path) == spec

    def test_unknown_yaml_keys(self, tmp_path):
        path = tmp_path / "spec.yaml"
        path.write_text("num_videos: 2\nframes_per_second: 30\n")
        with pytest.raises(ConfigError, match="frames_per_second"):
            SyntheticSpec.from_yaml(path)


class TestGenerateVideos:
    def test_shapes(self, tiny_spec, tiny_records):
        assert [r.video_id for r in tiny_records] == ["video_0000", "video_0001"]
        for record in tiny_records:
            assert record.streams == ["flow", "rgb"]
            assert record.features["rgb"].shape[1] == tiny_spec.feature_dim
            assert len(record.proposals) == tiny_spec.proposals_per_video
            assert len(record.ground_truths) == tiny_spec.instances_per_video
            assert all(0 <= p.start and p.end <= record.duration for p in record.proposals)

    def test_sample_kinds_by_construction(self):
        spec = SyntheticSpec(num_videos=4, proposals_per_video=20)
        for record in generate_videos(spec):
            kinds = [s.kind for s in label_samples(record.proposals, record.ground_truths)]
            assert (kinds.count(FOREGROUND), kinds.count(INCOMPLETE), kinds.count(BACKGROUND)) == (6, 6, 8)

    def test_noise_free_classes_are_separable(self):
        spec = SyntheticSpec(num_videos=6, num_classes=4, noise=0.0, feature_dim=12)
        pooled, labels = [], []
        for record in generate_videos(spec):
            for g in record.ground_truths:
                pooled.append(pool_proposal_feature(record.features["rgb"], g.interval, record.duration))
                labels.append(g.label)
        pooled, labels = np.array(pooled), np.array(labels)
        classes = np.unique(labels)
        centroids = np.stack([pooled[labels == c].mean(axis=0) for c in classes])
        predicted = classes[np.argmax(pooled @ centroids.T - 0.5 * np.sum(centroids**2, axis=1), axis=1)]
        assert np.all(predicted == labels)

    def test_prototypes_are_disjoint_blocks(self):
        protos = prototypes(SyntheticSpec(num_classes=2, feature_dim=8, separation=2.0))
        assert protos.shape == (4, 8)
        np.testing.assert_array_equal(protos @ protos.T, np.diag([8.0] * 4))

    def test_external_scores_rank_present_classes(self, tiny_records):
        scores = external_scores(tiny_records, 2)
        for record in tiny_records:
            present = {g.label for g in record.ground_truths}
            assert all(scores[record.video_id][m - 1] == 0.9 for m in present)


class TestGenerateSynthetic:
    def test_same_seed_same_bytes(self, tmp_path, tiny_spec):
        generate_synthetic(tiny_spec, tmp_path / "a")
        generate_synthetic(tiny_spec, tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_companion_files(self, tmp_path, tiny_spec):
        manifest = generate_synthetic(tiny_spec, tmp_path)
        records = load_dataset(manifest)
        table = read_ground_truth(tmp_path / "ground_truth.tsv")
        assert set(table) == {r.video_id for r in records}
        assert set(read_external_scores(tmp_path / "external_scores.tsv", tiny_spec.num_classes)) == set(table)
        assert SyntheticSpec.from_yaml(tmp_path / "spec.yaml") == tiny_spec


def hidden_flags(record, spec):
    """Per instance: True when its segments carry a single block (noise-free specs only)."""
    width = spec.feature_dim // (spec.num_classes + 2)
    flags = []
    for g in record.ground_truths:
        first = round(g.interval.start / spec.segment_length)
        stop = round(g.interval.end / spec.segment_length)
        counts = np.count_nonzero(record.features["rgb"][first:stop], axis=1)
        assert np.all(counts == width) or np.all(counts == 2 * width)
        flags.append(bool(np.all(counts == width)))
    return flags


class TestContextLayout:
    SPEC = SyntheticSpec(num_videos=8, proposals_per_video=30, noise=0.0, context=True, seed=4)

    @pytest.fixture(scope="class")
    def records(self):
        return generate_videos(self.SPEC)

    def test_default_layout_ignores_context_fields(self):
        tuned = generate_videos(SyntheticSpec(num_videos=2, hidden_fraction=0.9, loose_fraction=0.9))
        for a, b in zip(tuned, generate_videos(SyntheticSpec(num_videos=2))):
            assert a.proposals == b.proposals
            np.testing.assert_array_equal(a.features["rgb"], b.features["rgb"])

    def test_one_class_per_video(self, records):
        for record in records:
            assert len({g.label for g in record.ground_truths}) == 1

    def test_every_video_keeps_a_visible_instance(self, records):
        flags = [hidden_flags(record, self.SPEC) for record in records]
        assert all(not all(f) for f in flags)
        assert any(any(f) for f in flags)

    def test_outer_proposals_drift_outward(self, records):
        below_half = labeled = 0
        for record in records:
            first, last = record.ground_truths[0].interval, record.ground_truths[-1].interval
            for p in record.proposals:
                if abs(p.length - first.length) < 1e-9 and tiou(p, first) > 0:
                    assert p.center <= first.center
                    below_half += tiou(p, first) <= 0.5
                    labeled += tiou(p, first) >= 0.7
                if abs(p.length - last.length) < 1e-9 and tiou(p, last) > 0:
                    assert p.center >= last.center
        assert below_half > 0 and labeled > 0

    def test_background_has_no_surrounding_edge_to_actions(self, records):
        for record in records:
            graph = build_graph(build_proposals(record, "rgb"), GraphConfig(), capped=False)
            background = {
                s.proposal_id
                for s in label_samples(record.proposals, record.ground_truths)
                if s.kind == BACKGROUND
            }
            for e in graph.edges:
                if e.kind == SURROUNDING:
                    assert (e.src in background) == (e.dst in background)

    def test_hidden_instances_hear_from_a_visible_one(self, records):
        hidden = reached = 0
        for record in records:
            flags = hidden_flags(record, self.SPEC)
            owner = {}
            for i, p in enumerate(record.proposals):
                overlaps = [tiou(p, g.interval) for g in record.ground_truths]
                if max(overlaps) > 0:
                    owner[i] = int(np.argmax(overlaps))
            graph = build_graph(build_proposals(record, "rgb"), GraphConfig())
            for k in (k for k, flag in enumerate(flags) if flag):
                hidden += 1
                reached += any(
                    e.kind == SURROUNDING and owner.get(e.src) == k and e.dst in owner and not flags[owner[e.dst]]
                    for e in graph.edges
                )
        assert hidden > 0
        assert reached >= hidden / 2

    def test_rejects_out_of_range_fields(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(hidden_fraction=1.5)
        with pytest.raises(ConfigError):
            SyntheticSpec(max_displacement=0.8)
