import numpy as np
import pytest

from propgcn.bench import (
    ABLATION_PROFILE,
    ABLATION_SPEC,
    DEFAULT_VARIANTS,
    THETA_CTX_SWEEP,
    VARIANTS,
    bench_video,
    num_classes_of,
    run_ablation,
    run_bench,
)
from propgcn.errors import ConfigError, DataFormatError
from propgcn.synthetic import generate_videos


class TestVariants:
    def test_theta_sweep_is_registered(self):
        for theta in THETA_CTX_SWEEP:
            assert VARIANTS[f"theta_ctx={theta}"] == {"theta_ctx": theta}

    def test_defaults_are_known(self):
        assert set(DEFAULT_VARIANTS) <= set(VARIANTS)

    def test_unknown_variant(self, tiny_records):
        with pytest.raises(ConfigError, match="deeper"):
            run_ablation(tiny_records, variants=["gcn", "deeper"], quiet=True)

    def test_num_classes_needs_annotations(self, tiny_records):
        assert num_classes_of(tiny_records) <= 2
        for record in tiny_records:
            record.ground_truths = []
        with pytest.raises(DataFormatError):
            num_classes_of(tiny_records)


class TestBench:
    def test_bench_video(self):
        record = bench_video(num_proposals=60, seed=2)
        assert len(record.proposals) == 60
        assert record.streams == ["rgb"]

    def test_timings(self):
        timings = run_bench(
            num_proposals=60, num_samples_list=[1, 4], modes=["gcn", "mlp"], iterations=1, quiet=True
        )
        assert [(t["mode"], t["num_samples"]) for t in timings] == [
            ("gcn", 1),
            ("gcn", 4),
            ("mlp", 1),
            ("mlp", 4),
        ]
        assert all(t["seconds_per_iter"] > 0 and t["iterations"] == 1 for t in timings)

    def test_zero_iterations(self):
        with pytest.raises(ConfigError):
            run_bench(num_proposals=60, iterations=0, quiet=True)

    @pytest.mark.slow
    def test_time_grows_with_num_samples(self):
        timings = run_bench(num_proposals=1000, modes=["gcn"], iterations=5, quiet=True)
        assert [t["num_samples"] for t in timings] == [1, 2, 3, 4, 5, 10]
        seconds = [t["seconds_per_iter"] for t in timings]
        # 10% slack for timer jitter between neighboring counts
        assert all(b >= 0.9 * a for a, b in zip(seconds, seconds[1:]))
        assert seconds[-1] > seconds[0]


@pytest.mark.slow
def test_ablation_direction_over_seeds():
    records = generate_videos(ABLATION_SPEC)
    results = run_ablation(
        records,
        variants=["gcn", "mlp", "no-regression"],
        seeds=[0, 1, 2, 3, 4],
        base=ABLATION_PROFILE,
        quiet=True,
    )
    for maps in results.values():
        assert len(maps) == 5
        assert all(0.0 <= m <= 1.0 for m in maps)
    mean = {variant: np.mean(maps) for variant, maps in results.items()}
    assert mean["gcn"] >= mean["mlp"]
    assert mean["no-regression"] <= mean["gcn"]
