"""Dataset files: manifest, binary segment features, proposals, annotations,
the ground-truth table and external score tables, plus feature pooling."""

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from propgcn.errors import DataFormatError, ExternalScoreError, IntervalError, PropGcnError
from propgcn.intervals import GroundTruthInstance, Interval, Proposal, as_bounds, tiou_matrix

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "PROPGCN_DATA_ROOT"

FEATURE_MAGIC = b"PGFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHH16sII")


@dataclass
class VideoRecord:
    video_id: str
    duration: float
    features: Dict[str, np.ndarray]  # stream -> (num_segments, d) float32
    proposals: List[Interval]
    confidences: List[float] = field(default_factory=list)
    ground_truths: List[GroundTruthInstance] = field(default_factory=list)

    def __post_init__(self):
        if not self.duration > 0:
            raise DataFormatError(self.video_id, f"duration must be positive, got {self.duration}")
        if not self.confidences:
            self.confidences = [1.0] * len(self.proposals)
        if len(self.confidences) != len(self.proposals):
            raise DataFormatError(self.video_id, "one confidence per proposal expected")
        for stream, feats in self.features.items():
            if feats.ndim != 2 or feats.shape[0] < 1:
                raise DataFormatError(
                    self.video_id, f"stream {stream}: need at least one segment, got {feats.shape}"
                )

    @property
    def streams(self) -> List[str]:
        return sorted(self.features)

    def segment_length(self, stream: str) -> float:
        return self.duration / self.features[stream].shape[0]


def resolve_data_path(path) -> Path:
    """Relative paths that do not exist fall back to $PROPGCN_DATA_ROOT."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not path.is_absolute() and not path.exists() and root:
        return Path(root) / path
    return path


# feature files


def write_features(path, features: np.ndarray, stream: str) -> Path:
    path = Path(path)
    tag = stream.encode("ascii")
    if len(tag) > 16:
        raise DataFormatError(path, f"stream tag {stream!r} longer than 16 bytes")
    features = np.ascontiguousarray(features, dtype="<f4")
    num_segments, dim = features.shape
    with open(path, "wb") as f:
        f.write(
            _FEATURE_HEADER.pack(
                FEATURE_MAGIC, FEATURE_VERSION, 0, tag.ljust(16, b"\0"), num_segments, dim
            )
        )
        f.write(features.tobytes())
    return path


def read_features(path) -> Tuple[str, np.ndarray]:
    """Returns (stream tag, (num_segments, dim) float32 array)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataFormatError(path, f"cannot read feature file: {e.strerror or e}") from None
    if len(data) < _FEATURE_HEADER.size:
        raise DataFormatError(path, "truncated feature header")
    magic, version, _, tag, num_segments, dim = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(path, f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise DataFormatError(path, f"unsupported feature version {version}")
    if num_segments < 1 or dim < 1:
        raise DataFormatError(path, f"empty feature matrix ({num_segments} x {dim})")
    expected = _FEATURE_HEADER.size + 4 * num_segments * dim
    if len(data) != expected:
        raise DataFormatError(path, f"payload is {len(data)} bytes, expected {expected}")
    features = np.frombuffer(
        data, dtype="<f4", count=num_segments * dim, offset=_FEATURE_HEADER.size
    ).reshape(num_segments, dim)
    return tag.rstrip(b"\0").decode("ascii"), features.astype(np.float32)


# line-oriented text files


def _rows(path) -> Iterator[Tuple[int, List[str]]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataFormatError(path, f"cannot read file: {e.strerror or e}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _real(path, lineno: int, token: str, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise DataFormatError(path, f"{what} is not a number: {token!r}", lineno) from None


def _interval(path, lineno: int, start: str, end: str) -> Interval:
    s = _real(path, lineno, start, "t_start")
    e = _real(path, lineno, end, "t_end")
    if s < 0:
        raise DataFormatError(path, f"t_start must be >= 0, got {s}", lineno)
    try:
        return Interval(s, e)
    except IntervalError as err:
        raise DataFormatError(path, str(err), lineno) from None


def read_proposals(path) -> Tuple[List[Interval], List[float]]:
    intervals, confidences = [], []
    for lineno, tokens in _rows(path):
        if len(tokens) not in (2, 3):
            raise DataFormatError(path, "expected `t_start t_end [confidence]`", lineno)
        intervals.append(_interval(path, lineno, tokens[0], tokens[1]))
        confidences.append(
            _real(path, lineno, tokens[2], "confidence") if len(tokens) == 3 else 1.0
        )
    return intervals, confidences


def read_annotations(path) -> List[GroundTruthInstance]:
    instances = []
    for lineno, tokens in _rows(path):
        if len(tokens) != 3:
            raise DataFormatError(path, "expected `t_start t_end label`", lineno)
        interval = _interval(path, lineno, tokens[0], tokens[1])
        try:
            instances.append(GroundTruthInstance(interval, int(tokens[2])))
        except (ValueError, PropGcnError) as e:
            raise DataFormatError(path, f"bad label {tokens[2]!r}: {e}", lineno) from None
    return instances


def write_proposals(path, intervals: Sequence[Interval], confidences: Sequence[float]):
    lines = [f"{float(iv.start)!r} {float(iv.end)!r} {float(c)!r}" for iv, c in zip(intervals, confidences)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def write_annotations(path, instances: Sequence[GroundTruthInstance]):
    lines = [f"{float(g.interval.start)!r} {float(g.interval.end)!r} {int(g.label)}" for g in instances]
    Path(path).write_text("".join(line + "\n" for line in lines))


# manifest


def load_dataset(manifest) -> List[VideoRecord]:
    """Parse a manifest and load every video it lists.

    Line format: ``video_id duration proposals annotations stream=features ...``
    with ``-`` for a missing annotation file.
    """
    manifest = Path(manifest)
    base = manifest.parent
    records: List[VideoRecord] = []
    seen = set()
    for lineno, tokens in _rows(manifest):
        if len(tokens) < 5:
            raise DataFormatError(
                manifest,
                "expected `video_id duration proposals annotations stream=features ...`",
                lineno,
            )
        video_id, duration_token, proposals_token, annotations_token = tokens[:4]
        if video_id in seen:
            raise DataFormatError(manifest, f"duplicate video id {video_id!r}", lineno)
        seen.add(video_id)
        duration = _real(manifest, lineno, duration_token, "duration")
        if not duration > 0:
            raise DataFormatError(manifest, f"duration must be positive, got {duration}", lineno)

        features = {}
        for token in tokens[4:]:
            stream, sep, rel = token.partition("=")
            if not sep or not stream or not rel:
                raise DataFormatError(manifest, f"expected stream=path, got {token!r}", lineno)
            tag, feats = read_features(base / rel)
            if tag != stream:
                log.warning(f"{base / rel}: stream tag {tag!r} differs from manifest {stream!r}")
            features[stream] = feats

        intervals, confidences = read_proposals(base / proposals_token)
        for k, iv in enumerate(intervals):
            if iv.start >= duration:
                raise DataFormatError(
                    base / proposals_token,
                    f"proposal {k} starts at {iv.start}, past the video end {duration}",
                )
        annotations = [] if annotations_token == "-" else read_annotations(base / annotations_token)
        records.append(
            VideoRecord(video_id, duration, features, intervals, confidences, annotations)
        )

    if not records:
        log.warning(f"{manifest}: manifest lists no videos")
    return records


def write_dataset(records: Sequence[VideoRecord], directory, manifest_name: str = "manifest.txt") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for record in records:
        proposals = f"{record.video_id}.proposals.txt"
        write_proposals(directory / proposals, record.proposals, record.confidences)
        annotations = "-"
        if record.ground_truths:
            annotations = f"{record.video_id}.annotations.txt"
            write_annotations(directory / annotations, record.ground_truths)
        streams = []
        for stream in record.streams:
            name = f"{record.video_id}.{stream}.feat"
            write_features(directory / name, record.features[stream], stream)
            streams.append(f"{stream}={name}")
        lines.append(
            " ".join([record.video_id, repr(float(record.duration)), proposals, annotations, *streams])
        )
    manifest = directory / manifest_name
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


# ground truth and external score tables


def ground_truth_table(records: Sequence[VideoRecord]) -> Dict[str, List[GroundTruthInstance]]:
    return {r.video_id: list(r.ground_truths) for r in records}


def write_ground_truth(path, ground_truths: Mapping[str, Sequence[GroundTruthInstance]]):
    rows = [
        (vid, g.interval.start, g.interval.end, g.label)
        for vid, instances in ground_truths.items()
        for g in instances
    ]
    frame = pd.DataFrame(rows, columns=["video_id", "t_start", "t_end", "class"])
    frame.to_csv(path, sep="\t", header=False, index=False, float_format="%.6f")


def read_table(path, columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(path, "file not found")
    try:
        frame = pd.read_csv(
            path, sep=r"\s+", header=None, comment="#", dtype={0: str}, engine="python"
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(columns))
    except pd.errors.ParserError as e:
        raise DataFormatError(path, f"malformed table: {e}") from None
    if frame.shape[1] != len(columns):
        raise DataFormatError(path, f"expected {len(columns)} columns ({' '.join(columns)})")
    frame.columns = list(columns)
    return frame


def read_ground_truth(path) -> Dict[str, List[GroundTruthInstance]]:
    """Load a `video_id t_start t_end class` table keyed by video."""
    frame = read_table(path, ["video_id", "t_start", "t_end", "label"])
    table: Dict[str, List[GroundTruthInstance]] = {}
    for row in frame.itertuples(index=True):
        try:
            instance = GroundTruthInstance(
                Interval(float(row.t_start), float(row.t_end)), int(row.label)
            )
        except (ValueError, TypeError, PropGcnError) as e:
            raise DataFormatError(path, str(e), row.Index + 1) from None
        table.setdefault(str(row.video_id), []).append(instance)
    return table


def read_external_scores(path, num_classes: int) -> Dict[str, np.ndarray]:
    """Video-level class scores, one (num_classes,) vector per video; unlisted classes score 0."""
    frame = read_table(path, ["video_id", "label", "score"])
    scores: Dict[str, np.ndarray] = {}
    for row in frame.itertuples(index=True):
        try:
            label, value = int(row.label), float(row.score)
        except (ValueError, TypeError) as e:
            raise DataFormatError(path, str(e), row.Index + 1) from None
        if not 1 <= label <= num_classes:
            raise DataFormatError(path, f"class {label} outside 1..{num_classes}", row.Index + 1)
        scores.setdefault(str(row.video_id), np.zeros(num_classes))[label - 1] = value
    return scores


def external_scores_for(scores: Mapping[str, np.ndarray], video_id: str) -> np.ndarray:
    try:
        return scores[video_id]
    except KeyError:
        raise ExternalScoreError(f"no external scores for video {video_id!r}") from None


def write_external_scores(path, scores: Mapping[str, np.ndarray]):
    rows = [
        (vid, m + 1, float(value))
        for vid, vector in scores.items()
        for m, value in enumerate(vector)
    ]
    frame = pd.DataFrame(rows, columns=["video_id", "class", "score"])
    frame.to_csv(path, sep="\t", header=False, index=False, float_format="%.6f")


# pooling


def pool_proposal_feature(
    segment_features: np.ndarray, interval: Interval, duration: float
) -> np.ndarray:
    """Elementwise max over the segments whose span intersects the interval."""
    n = segment_features.shape[0]
    bounds = np.arange(n + 1) * (duration / n)
    mask = (bounds[:-1] < interval.end) & (bounds[1:] > interval.start)
    if not mask.any():
        raise IntervalError(
            f"interval [{interval.start}, {interval.end}] lies outside the video [0, {duration}]"
        )
    return segment_features[mask].max(axis=0).astype(np.float64)


def _pool_span(segment_features: np.ndarray, start: float, end: float, duration: float) -> np.ndarray:
    start, end = max(start, 0.0), min(end, duration)
    if not end > start:
        return np.zeros(segment_features.shape[1], dtype=np.float64)
    return pool_proposal_feature(segment_features, Interval(start, end), duration)


def pool_extended_feature(
    segment_features: np.ndarray, interval: Interval, duration: float
) -> np.ndarray:
    """start || center || end portions, the outer two extending half the length
    to each side and clipped to the video; an empty portion pools to zeros."""
    half = 0.5 * interval.length
    center = pool_proposal_feature(segment_features, interval, duration)
    left = _pool_span(segment_features, interval.start - half, interval.start, duration)
    right = _pool_span(segment_features, interval.end, interval.end + half, duration)
    return np.concatenate([left, center, right])


def build_proposals(record: VideoRecord, stream: str) -> List[Proposal]:
    """Pool one stream's features for every proposal of the video."""
    try:
        segments = record.features[stream]
    except KeyError:
        raise DataFormatError(
            record.video_id, f"no {stream!r} features (has {record.streams})"
        ) from None

    links: List[Optional[GroundTruthInstance]] = [None] * len(record.proposals)
    if record.ground_truths and record.proposals:
        ps, pe = as_bounds(record.proposals)
        gs, ge = as_bounds([g.interval for g in record.ground_truths])
        iou = tiou_matrix(ps, pe, gs, ge)
        for i, j in enumerate(np.argmax(iou, axis=1)):
            if iou[i, j] > 0.0:
                links[i] = record.ground_truths[j]

    proposals = []
    for i, (interval, confidence) in enumerate(zip(record.proposals, record.confidences)):
        try:
            feature = pool_proposal_feature(segments, interval, record.duration)
        except IntervalError as e:
            raise DataFormatError(record.video_id, f"proposal {i}: {e}") from None
        proposals.append(
            Proposal(
                id=i,
                interval=interval,
                feature=feature,
                extended_feature=pool_extended_feature(segments, interval, record.duration),
                gt=links[i],
                confidence=float(confidence),
            )
        )
    return proposals
