import pytest

from propgcn import __version__
from propgcn.checkpoint import checkpoint_extra, restore_checkpoint
from propgcn import cli
from propgcn.cli import main
from propgcn.data import build_proposals, load_dataset
from propgcn.graph import GraphConfig, build_graph
from propgcn.reports import read_detections
from propgcn.synthetic import SyntheticSpec

SPEC = SyntheticSpec(
    num_videos=3,
    num_classes=2,
    proposals_per_video=16,
    feature_dim=8,
    instances_per_video=2,
    seed=3,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.yaml"
    spec_path.write_text(SPEC.to_yaml())
    assert main(["synth", "--spec", str(spec_path), "--out", str(root / "data"), "--quiet"]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def checkpoints(dataset):
    paths = {}
    for stream in ("rgb", "flow"):
        paths[stream] = dataset.parent / f"{stream}.ckpt"
        argv = ["train", "--data", str(dataset / "manifest.txt"), "--stream", stream]
        argv += ["--out", str(paths[stream]), "--epochs", "2", "--quiet"]
        assert main(argv) == 0
    return paths


class TestSynth:
    def test_files(self, dataset):
        assert (dataset / "manifest.txt").exists()
        assert (dataset / "ground_truth.tsv").exists()
        assert SyntheticSpec.from_yaml(dataset / "spec.yaml") == SPEC
        assert len(load_dataset(dataset / "manifest.txt")) == 3

    def test_seed_flag_overrides_spec(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--seed", "11", "--quiet"]) == 0
        assert SyntheticSpec.from_yaml(tmp_path / "spec.yaml").seed == 11


class TestBuildGraph:
    def expected_lines(self, dataset, capped=True):
        record = load_dataset(dataset / "manifest.txt")[0]
        return build_graph(build_proposals(record, "rgb"), GraphConfig(), capped=capped).edge_lines()

    def test_stdout(self, dataset, capsys):
        assert main(["build-graph", "--data", str(dataset / "manifest.txt"), "--video", "video_0000"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines == self.expected_lines(dataset)
        for line in lines:
            src, dst, kind, weight = line.split()
            assert kind in ("contextual", "surrounding")
            assert 0.0 <= float(weight) <= 1.0

    def test_out_file_uncapped(self, dataset, tmp_path):
        out = tmp_path / "edges.txt"
        argv = ["build-graph", "--data", str(dataset / "manifest.txt"), "--video", "video_0000"]
        assert main(argv + ["--uncapped", "--out", str(out)]) == 0
        assert out.read_text().splitlines() == self.expected_lines(dataset, capped=False)

    def test_unknown_video(self, dataset, capsys):
        argv = ["build-graph", "--data", str(dataset / "manifest.txt"), "--video", "nope"]
        assert main(argv) == 1
        assert "nope" in capsys.readouterr().err


class TestTrain:
    def test_checkpoints(self, checkpoints):
        rgb = restore_checkpoint(checkpoints["rgb"])
        assert rgb.epoch == 2
        assert rgb.model.meta == {"stream": "rgb", "num_classes": 2}
        assert restore_checkpoint(checkpoints["flow"]).model.meta["stream"] == "flow"
        settings = checkpoint_extra(checkpoints["flow"])["settings"]
        assert settings["stream"] == "flow"
        assert settings["lr_initial"] == 0.01

    def test_epoch_lines(self, dataset, tmp_path, capsys):
        argv = ["train", "--data", str(dataset / "manifest.txt"), "--out", str(tmp_path / "m.ckpt")]
        assert main(argv + ["--epochs", "2", "--quiet", "--log-file", str(tmp_path / "train.log")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [line.split("\t")[0] for line in lines] == ["0", "1"]
        assert all(len(line.split("\t")) == 7 for line in lines)
        assert (tmp_path / "train.log").read_text().splitlines() == lines

    def test_missing_manifest(self, tmp_path, capsys):
        argv = ["train", "--data", str(tmp_path / "absent.txt"), "--out", str(tmp_path / "m.ckpt")]
        assert main(argv + ["--quiet"]) == 1
        err = capsys.readouterr().err
        assert "error:" in err
        assert "absent.txt" in err


class TestInferAndEval:
    def test_fused_pipeline(self, dataset, checkpoints, tmp_path, capsys):
        detections = tmp_path / "dets.tsv"
        argv = ["infer", "--data", str(dataset / "manifest.txt"), "--quiet"]
        argv += ["--checkpoint", str(checkpoints["rgb"]), "--checkpoint2", str(checkpoints["flow"])]
        assert main(argv + ["--out", str(detections)]) == 0
        dets = read_detections(detections)
        assert dets
        assert {d.video_id for d in dets} <= {"video_0000", "video_0001", "video_0002"}
        assert all(d.label in (1, 2) and d.score >= 0 for d in dets)

        argv = ["eval", "--detections", str(detections), "--ground-truth", str(dataset / "ground_truth.tsv")]
        assert main(argv + ["--out", str(tmp_path / "report")]) == 0
        assert "mAP" in capsys.readouterr().out
        assert (tmp_path / "report" / "map_report.txt").exists()

    def test_external_scores(self, dataset, checkpoints, tmp_path):
        detections = tmp_path / "dets.tsv"
        argv = ["infer", "--data", str(dataset / "manifest.txt"), "--checkpoint", str(checkpoints["rgb"])]
        argv += ["--external-scores", str(dataset / "external_scores.tsv"), "--top-k", "5"]
        assert main(argv + ["--out", str(detections), "--quiet"]) == 0
        per_video = {}
        for d in read_detections(detections):
            per_video[d.video_id] = per_video.get(d.video_id, 0) + 1
        assert all(n <= 5 for n in per_video.values())


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert __version__ in capsys.readouterr().out


class TestProfilesAtInference:
    def test_checkpoint_keeps_only_explicit_keys(self, checkpoints):
        explicit = checkpoint_extra(checkpoints["rgb"])["explicit"]
        assert explicit["stream"] == "rgb"
        assert explicit["epochs"] == 2
        assert "top_k" not in explicit and "batch_size" not in explicit

    def test_dataset_flag_brings_its_profile(self, dataset, checkpoints, tmp_path, monkeypatch):
        seen = []

        def capture(predictions, settings, external=None):
            seen.append(settings)
            return []

        monkeypatch.setattr(cli, "detect", capture)
        argv = ["infer", "--data", str(dataset / "manifest.txt"), "--checkpoint", str(checkpoints["rgb"])]
        assert main(argv + ["--dataset", "activitynet", "--out", str(tmp_path / "d.tsv"), "--quiet"]) == 0
        (settings,) = seen
        assert settings.dataset == "activitynet"
        assert settings.eval.top_k == 100
        assert settings.train.epochs == 2


class TestBadInputFiles:
    def test_missing_synthetic_spec(self, tmp_path, capsys):
        assert main(["synth", "--spec", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "d")]) == 1
        err = capsys.readouterr().err
        assert "error:" in err and "missing.yaml" in err

    def test_invalid_synthetic_spec(self, tmp_path, capsys):
        spec = tmp_path / "spec.yaml"
        spec.write_text("num_videos: [1, 2\n")
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 1
        assert "invalid YAML" in capsys.readouterr().err

    def test_ragged_detection_file(self, dataset, tmp_path, capsys):
        detections = tmp_path / "dets.tsv"
        detections.write_text("video_0000\t0.0\t1.0\t1\t0.5\nvideo_0000\t0.0\t1.0\t1\t0.5\t9\n")
        argv = ["eval", "--detections", str(detections), "--ground-truth", str(dataset / "ground_truth.tsv")]
        assert main(argv) == 1
        assert "dets.tsv" in capsys.readouterr().err

    def test_ragged_ground_truth(self, tmp_path, capsys):
        (tmp_path / "dets.tsv").write_text("v\t0.0\t1.0\t1\t0.5\n")
        (tmp_path / "gt.tsv").write_text("v\t0.0\t1.0\t1\nv\t0.0\t1.0\n")
        argv = ["eval", "--detections", str(tmp_path / "dets.tsv"), "--ground-truth", str(tmp_path / "gt.tsv")]
        assert main(argv) == 1
        assert "gt.tsv" in capsys.readouterr().err


@pytest.mark.slow
def test_same_seed_runs_are_byte_identical(tmp_path):
    roots = [tmp_path / "first", tmp_path / "second"]
    for root in roots:
        data = root / "data"
        assert main(["synth", "--out", str(data), "--seed", "5", "--quiet"]) == 0
        manifest = str(data / "manifest.txt")
        for stream in ("rgb", "flow"):
            argv = ["train", "--data", manifest, "--stream", stream, "--epochs", "3", "--seed", "5"]
            assert main(argv + ["--out", str(root / f"{stream}.ckpt"), "--quiet"]) == 0
        argv = ["infer", "--data", manifest, "--checkpoint", str(root / "rgb.ckpt")]
        argv += ["--checkpoint2", str(root / "flow.ckpt"), "--out", str(root / "dets.tsv"), "--quiet"]
        assert main(argv) == 0
        argv = ["eval", "--detections", str(root / "dets.tsv"), "--ground-truth", str(data / "ground_truth.tsv")]
        assert main(argv + ["--out", str(root / "report")]) == 0

    for name in ("rgb.ckpt", "flow.ckpt", "dets.tsv", "report/map_report.txt"):
        assert (roots[0] / name).read_bytes() == (roots[1] / name).read_bytes(), name
