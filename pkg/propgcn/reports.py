"""Detection files and human/CSV reports for evaluation, ablation and bench runs."""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import pandas as pd
from rich.table import Table

from propgcn.data import read_table
from propgcn.errors import DataFormatError, PropGcnError
from propgcn.evaluation import Detection, MapResult
from propgcn.intervals import Interval

log = logging.getLogger(__name__)


def detections_frame(detections: Sequence[Detection]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (d.video_id, d.interval.start, d.interval.end, d.label, d.score)
            for d in detections
        ],
        columns=["video_id", "t_start", "t_end", "class", "score"],
    )


def write_detections(path, detections: Sequence[Detection]) -> Path:
    """Tab-separated `video_id t_start t_end class score`, reals with 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    detections_frame(detections).to_csv(
        path, sep="\t", header=False, index=False, float_format="%.6f"
    )
    return path


def read_detections(path) -> List[Detection]:
    frame = read_table(path, ["video_id", "t_start", "t_end", "label", "score"])
    detections = []
    for row in frame.itertuples(index=True):
        try:
            detections.append(
                Detection(
                    video_id=str(row.video_id),
                    label=int(row.label),
                    interval=Interval(float(row.t_start), float(row.t_end)),
                    score=float(row.score),
                )
            )
        except (ValueError, TypeError, PropGcnError) as e:
            raise DataFormatError(path, str(e), row.Index + 1) from None
    return detections


def format_map_report(result: MapResult, title: str = "DETECTION mAP REPORT") -> str:
    lines = ["=" * 40, title, "=" * 40, ""]
    lines.append(f"Classes evaluated: {len(result.classes)}")
    lines.append("")
    lines.append(f"{'tIoU':<10}{'mAP':>10}")
    lines.append("-" * 20)
    for t, value in result.per_threshold.items():
        lines.append(f"{t:<10.2f}{value:>10.4f}")
    if result.average_thresholds:
        lo, hi = result.average_thresholds[0], result.average_thresholds[-1]
        lines.append("-" * 20)
        lines.append(f"{'average':<10}{result.average_map:>10.4f}   ({lo:.2f}:{hi:.2f})")
    lines.append("")
    return "\n".join(lines)


def map_table(result: MapResult, title: str = "mAP") -> Table:
    table = Table(title=title)
    table.add_column("tIoU", justify="right", style="cyan")
    table.add_column("mAP", justify="right", style="green")
    for t, value in result.per_threshold.items():
        table.add_row(f"{t:.2f}", f"{value:.4f}")
    if result.average_thresholds:
        table.add_row("average", f"{result.average_map:.4f}", style="bold")
    return table


def map_frames(result: MapResult):
    """(threshold,mAP) frame and long-form per-class AP frame."""
    summary = [{"threshold": f"{t:.2f}", "mAP": v} for t, v in result.per_threshold.items()]
    if result.average_thresholds:
        summary.append({"threshold": "average", "mAP": result.average_map})
    per_class = [
        {"threshold": f"{t:.2f}", "class": c, "AP": ap}
        for t, aps in result.per_class.items()
        for c, ap in aps.items()
    ]
    return pd.DataFrame(summary), pd.DataFrame(per_class, columns=["threshold", "class", "AP"])


def write_map_report(result: MapResult, output_dir, stem: str = "map") -> Dict[str, Path]:
    """Text table plus its CSV twins under ``output_dir``."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "text": output_dir / f"{stem}_report.txt",
        "csv": output_dir / f"{stem}.csv",
        "per_class": output_dir / f"{stem}_per_class.csv",
    }
    paths["text"].write_text(format_map_report(result))
    summary, per_class = map_frames(result)
    summary.to_csv(paths["csv"], index=False, float_format="%.6f")
    per_class.to_csv(paths["per_class"], index=False, float_format="%.6f")
    log.info(f"mAP report written to {output_dir}")
    return paths


def comparison_table(frame: pd.DataFrame, title: str) -> Table:
    table = Table(title=title)
    for column in frame.columns:
        numeric = pd.api.types.is_numeric_dtype(frame[column])
        table.add_column(str(column), justify="right" if numeric else "left")
    for row in frame.itertuples(index=False):
        table.add_row(*[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    return table


def ablation_frame(results: Mapping[str, Sequence[float]], threshold: float = 0.5) -> pd.DataFrame:
    """One row per variant: mean and spread of mAP over seeds."""
    rows = []
    for variant, maps in results.items():
        series = pd.Series(list(maps), dtype=float)
        rows.append(
            {
                "variant": variant,
                "seeds": len(series),
                f"mAP@{threshold:.2f}": series.mean(),
                "std": series.std(ddof=0) if len(series) else float("nan"),
            }
        )
    return pd.DataFrame(rows)


def bench_frame(timings: Sequence[Mapping[str, object]]) -> pd.DataFrame:
    return pd.DataFrame(list(timings), columns=["mode", "num_samples", "seconds_per_iter", "iterations"])
