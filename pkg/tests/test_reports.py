import pandas as pd
import pytest
from rich.console import Console

from propgcn.errors import DataFormatError
from propgcn.evaluation import Detection, MapResult
from propgcn.intervals import Interval
from propgcn.reports import (
    ablation_frame,
    bench_frame,
    comparison_table,
    format_map_report,
    map_table,
    read_detections,
    write_detections,
    write_map_report,
)


@pytest.fixture
def result():
    return MapResult(
        per_threshold={0.5: 0.75, 0.75: 0.5},
        per_class={0.5: {1: 1.0, 2: 0.5}, 0.75: {1: 0.5, 2: 0.5}},
        average_thresholds=(0.5, 0.75),
        average_map=0.625,
        classes=[1, 2],
    )


def render(renderable) -> str:
    console = Console(width=100, record=True)
    console.print(renderable)
    return console.export_text()


class TestDetectionFiles:
    def test_round_trip(self, tmp_path):
        detections = [
            Detection("video_0000", 2, Interval(1.5, 4.25), 0.875),
            Detection("video_0001", 1, Interval(0.0, 2.0), 0.125),
        ]
        path = write_detections(tmp_path / "out" / "dets.tsv", detections)
        assert path.read_text().splitlines()[0] == "video_0000\t1.500000\t4.250000\t2\t0.875000"
        assert read_detections(path) == detections

    def test_empty(self, tmp_path):
        path = write_detections(tmp_path / "dets.tsv", [])
        assert read_detections(path) == []

    def test_bad_row(self, tmp_path):
        path = tmp_path / "dets.tsv"
        path.write_text("v\t0\t1\t1\t0.5\nv\t3\t2\t1\t0.5\n")
        with pytest.raises(DataFormatError) as excinfo:
            read_detections(path)
        assert excinfo.value.line == 2


class TestMapReports:
    def test_text_report(self, result):
        text = format_map_report(result)
        assert "Classes evaluated: 2" in text
        assert "0.50" in text and "0.7500" in text
        assert "average" in text and "0.6250" in text

    def test_rich_table(self, result):
        text = render(map_table(result))
        assert "0.75" in text
        assert "0.6250" in text

    def test_written_files(self, result, tmp_path):
        paths = write_map_report(result, tmp_path / "report")
        assert all(p.exists() for p in paths.values())
        summary = pd.read_csv(paths["csv"], dtype={"threshold": str})
        assert list(summary["threshold"]) == ["0.50", "0.75", "average"]
        assert summary["mAP"].tolist() == pytest.approx([0.75, 0.5, 0.625])
        per_class = pd.read_csv(paths["per_class"])
        assert len(per_class) == 4
        assert set(per_class["class"]) == {1, 2}


class TestComparisons:
    def test_ablation_frame(self):
        frame = ablation_frame({"gcn": [0.5, 0.7], "mlp": [0.4]})
        assert list(frame.columns) == ["variant", "seeds", "mAP@0.50", "std"]
        gcn = frame.set_index("variant").loc["gcn"]
        assert gcn["seeds"] == 2
        assert gcn["mAP@0.50"] == pytest.approx(0.6)
        assert gcn["std"] == pytest.approx(0.1)
        assert frame.set_index("variant").loc["mlp", "std"] == 0.0

    def test_comparison_table(self):
        frame = ablation_frame({"gcn": [0.5, 0.7]})
        text = render(comparison_table(frame, "ablation"))
        assert "ablation" in text
        assert "gcn" in text and "0.6000" in text

    def test_bench_frame(self):
        frame = bench_frame([{"mode": "gcn", "num_samples": 4, "seconds_per_iter": 0.01, "iterations": 3}])
        assert frame.loc[0, "mode"] == "gcn"
        assert frame.loc[0, "num_samples"] == 4
