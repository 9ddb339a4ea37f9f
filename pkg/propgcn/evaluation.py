"""Inference, two-stream fusion, detection scoring, NMS and mAP."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from propgcn.errors import ConfigError, EvaluationError, ExternalScoreError
from propgcn.graph import ProposalGraph
from propgcn.intervals import GroundTruthInstance, Interval, as_bounds, tiou_matrix
from propgcn.model import ProposalModel

log = logging.getLogger(__name__)

THUMOS_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
ACTIVITYNET_THRESHOLDS = (0.5, 0.75, 0.95)
AVERAGE_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

EVAL_PROFILES = {
    "thumos": {"top_k": 600, "map_thresholds": THUMOS_THRESHOLDS},
    "activitynet": {"top_k": 100, "map_thresholds": ACTIVITYNET_THRESHOLDS},
}


@dataclass(frozen=True)
class Detection:
    video_id: str
    label: int
    interval: Interval
    score: float

    def __post_init__(self):
        if self.label < 1:
            raise EvaluationError(f"detection label must be >= 1, got {self.label}")
        if not (math.isfinite(self.score) and self.score >= 0.0):
            raise EvaluationError(f"detection score must be finite and >= 0, got {self.score}")


@dataclass(frozen=True)
class EvalConfig:
    fusion_weights: Tuple[float, float] = (2.0, 3.0)
    nms_threshold: float = 0.3
    top_k: int = 600
    map_thresholds: Tuple[float, ...] = THUMOS_THRESHOLDS
    average_thresholds: Tuple[float, ...] = AVERAGE_THRESHOLDS
    use_regression: bool = True
    external_top: int = 2

    def __post_init__(self):
        object.__setattr__(self, "fusion_weights", tuple(float(w) for w in self.fusion_weights))
        object.__setattr__(self, "map_thresholds", tuple(float(t) for t in self.map_thresholds))
        object.__setattr__(
            self, "average_thresholds", tuple(float(t) for t in self.average_thresholds)
        )
        w = self.fusion_weights
        if len(w) != 2 or min(w) < 0 or sum(w) <= 0:
            raise ConfigError(f"fusion_weights must be two non-negative reals, got {w}")
        for t in (self.nms_threshold, *self.map_thresholds, *self.average_thresholds):
            if not 0.0 < t < 1.0:
                raise ConfigError(f"tIoU thresholds must lie in (0, 1), got {t}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.external_top < 1:
            raise ConfigError(f"external_top must be >= 1, got {self.external_top}")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "EvalConfig":
        try:
            values = dict(EVAL_PROFILES[profile])
        except KeyError:
            raise ConfigError(f"unknown dataset profile {profile!r}") from None
        values.update(overrides)
        return cls(**values)


@dataclass
class VideoPredictions:
    """Per-proposal head outputs of one video."""

    video_id: str
    intervals: List[Interval]
    probs: np.ndarray  # (N, C + 1)
    completeness: np.ndarray  # (N, C)
    offsets: np.ndarray  # (N, C, 2)
    confidence: np.ndarray  # (N,)
    duration: Optional[float] = None

    @property
    def num_classes(self) -> int:
        return self.completeness.shape[1]


def infer_video(
    graph: ProposalGraph,
    x: np.ndarray,
    x_ext: np.ndarray,
    model: ProposalModel,
    video_id: str = "",
    duration: Optional[float] = None,
) -> VideoPredictions:
    """Eval-mode forward over every proposal: full neighbor lists, no dropout."""
    outputs, _ = model.forward(graph, x, x_ext, training=False)
    return VideoPredictions(
        video_id=video_id,
        intervals=[p.interval for p in graph.nodes],
        probs=outputs.probs,
        completeness=outputs.completeness,
        offsets=outputs.offsets,
        confidence=np.array([p.confidence for p in graph.nodes], dtype=np.float64),
        duration=duration,
    )


def fuse_streams(
    first: VideoPredictions, second: VideoPredictions, weights: Tuple[float, float] = (2.0, 3.0)
) -> VideoPredictions:
    """Weighted average of two streams' outputs, offsets included."""
    if first.video_id != second.video_id or first.intervals != second.intervals:
        raise EvaluationError(
            f"streams disagree on the proposal set of video {first.video_id!r}/{second.video_id!r}"
        )
    if first.probs.shape != second.probs.shape:
        raise EvaluationError(
            f"streams predict different class counts: {first.probs.shape} vs {second.probs.shape}"
        )
    w1, w2 = weights
    total = w1 + w2
    if w1 < 0 or w2 < 0 or total <= 0:
        raise ConfigError(f"fusion weights must be non-negative with a positive sum, got {weights}")
    a, b = w1 / total, w2 / total

    def mix(u, v):
        if b == 0.0:
            return u.copy()
        if a == 0.0:
            return v.copy()
        return a * u + b * v

    return VideoPredictions(
        video_id=first.video_id,
        intervals=list(first.intervals),
        probs=mix(first.probs, second.probs),
        completeness=mix(first.completeness, second.completeness),
        offsets=mix(first.offsets, second.offsets),
        confidence=first.confidence.copy(),
        duration=first.duration,
    )


def score_detections(probs: np.ndarray, completeness: np.ndarray) -> np.ndarray:
    """Per-class p_m * c_m for m >= 1, clamped at 0; shape (..., C)."""
    return np.maximum(probs[..., 1:] * completeness, 0.0)


def top_external_classes(external_scores: np.ndarray, top: int = 2) -> np.ndarray:
    """1-based labels of the ``top`` highest external scores, ties to the lower label."""
    order = np.lexsort((np.arange(len(external_scores)), -external_scores))
    return order[:top] + 1


def score_with_external(
    class_scores: np.ndarray,
    proposal_confidence: np.ndarray,
    external_scores: np.ndarray,
    top: int = 2,
) -> Tuple[np.ndarray, np.ndarray]:
    """Four-factor product s_act * s_com * s_prop * s_ext.

    ``class_scores`` already holds s_act * s_com per class. Returns the
    combined (N, C) matrix and the labels it is restricted to.
    """
    external_scores = np.asarray(external_scores, dtype=np.float64)
    if external_scores.shape != (class_scores.shape[-1],):
        raise ExternalScoreError(
            f"expected {class_scores.shape[-1]} external class scores, got {external_scores.shape}"
        )
    classes = top_external_classes(external_scores, top)
    combined = class_scores * np.asarray(proposal_confidence)[:, None] * external_scores[None, :]
    return combined, classes


def nms(detections: Sequence[Detection], tiou_threshold: float = 0.3) -> List[Detection]:
    """Greedy NMS over one class; ties go to the earlier start, then the earlier end."""
    if not detections:
        return []
    starts, ends = as_bounds([d.interval for d in detections])
    scores = np.array([d.score for d in detections])
    order = np.lexsort((ends, starts, -scores))
    iou = tiou_matrix(starts, ends, starts, ends)

    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        order = rest[iou[i, rest] <= tiou_threshold]
    return [detections[i] for i in keep]


def decode_detections(
    predictions: VideoPredictions,
    class_scores: np.ndarray,
    config: EvalConfig = EvalConfig(),
    classes: Optional[Sequence[int]] = None,
) -> List[Detection]:
    """Class-specific boundary decoding, per-class NMS, then the video's top_k.

    Decoded intervals are clipped to [0, duration] when the duration is known;
    intervals that collapse or overflow are dropped. Without regression the
    proposal intervals are emitted unchanged.
    """
    if not predictions.intervals:
        return []
    starts, ends = as_bounds(predictions.intervals)
    centers = 0.5 * (starts + ends)
    lengths = ends - starts
    labels = classes if classes is not None else range(1, predictions.num_classes + 1)

    kept: List[Detection] = []
    for label in labels:
        m = int(label) - 1
        if config.use_regression:
            o_c = predictions.offsets[:, m, 0]
            o_l = predictions.offsets[:, m, 1]
            with np.errstate(over="ignore", invalid="ignore"):
                new_len = lengths * np.exp(-o_l)
                new_center = centers - o_c * lengths
                s = new_center - 0.5 * new_len
                e = new_center + 0.5 * new_len
        else:
            s, e = starts, ends
        if predictions.duration is not None:
            s = np.clip(s, 0.0, predictions.duration)
            e = np.clip(e, 0.0, predictions.duration)
        valid = np.isfinite(s) & np.isfinite(e) & (e > s)
        dropped = int(np.sum(~valid))
        if dropped:
            log.debug(f"{predictions.video_id}: class {label}: {dropped} decoded intervals dropped")

        candidates = [
            Detection(
                video_id=predictions.video_id,
                label=int(label),
                interval=Interval(float(s[i]), float(e[i])),
                score=float(class_scores[i, m]),
            )
            for i in np.flatnonzero(valid)
        ]
        kept.extend(nms(candidates, config.nms_threshold))

    kept.sort(key=lambda d: (-d.score, d.label, d.interval.start, d.interval.end))
    return kept[: config.top_k]


def detect_video(
    predictions: VideoPredictions,
    config: EvalConfig = EvalConfig(),
    external_scores: Optional[np.ndarray] = None,
) -> List[Detection]:
    scores = score_detections(predictions.probs, predictions.completeness)
    classes = None
    if external_scores is not None:
        scores, classes = score_with_external(
            scores, predictions.confidence, external_scores, config.external_top
        )
    return decode_detections(predictions, scores, config, classes)


def voc_average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the PR curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # precision envelope
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def average_precision(
    detections: Sequence[Detection],
    ground_truths: Mapping[str, Sequence[Interval]],
    tiou_threshold: float,
) -> float:
    """AP for one class. Each detection, best score first, claims the unmatched
    ground truth of its video with the highest tIoU; a hit needs tIoU > threshold.
    """
    num_positives = sum(len(v) for v in ground_truths.values())
    if num_positives == 0:
        raise EvaluationError("average_precision needs at least one ground truth")
    if not detections:
        return 0.0

    ordered = sorted(
        detections, key=lambda d: (-d.score, d.video_id, d.interval.start, d.interval.end)
    )
    matched = {vid: np.zeros(len(gts), dtype=bool) for vid, gts in ground_truths.items()}
    bounds = {vid: as_bounds(gts) for vid, gts in ground_truths.items() if gts}

    hits = np.zeros(len(ordered))
    for k, det in enumerate(ordered):
        if det.video_id not in bounds:
            continue
        gs, ge = bounds[det.video_id]
        iou = tiou_matrix(
            np.array([det.interval.start]), np.array([det.interval.end]), gs, ge
        )[0]
        iou[matched[det.video_id]] = -1.0
        best = int(np.argmax(iou))
        if iou[best] > tiou_threshold:
            matched[det.video_id][best] = True
            hits[k] = 1.0

    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    return voc_average_precision(tp / num_positives, tp / (tp + fp))


@dataclass
class MapResult:
    per_threshold: Dict[float, float]
    per_class: Dict[float, Dict[int, float]]
    average_thresholds: Tuple[float, ...] = ()
    average_map: float = float("nan")
    classes: List[int] = field(default_factory=list)


def _map_at(detections_by_class, gts_by_class, classes, threshold) -> Tuple[float, Dict[int, float]]:
    per_class = {
        c: average_precision(detections_by_class.get(c, []), gts_by_class[c], threshold)
        for c in classes
    }
    return float(np.mean(list(per_class.values()))), per_class


def mean_average_precision(
    detections: Sequence[Detection],
    ground_truths: Mapping[str, Sequence[GroundTruthInstance]],
    thresholds: Sequence[float] = THUMOS_THRESHOLDS,
    average_thresholds: Sequence[float] = AVERAGE_THRESHOLDS,
) -> MapResult:
    """mAP per threshold over the classes present in the ground truth, plus
    the mean mAP over ``average_thresholds``."""
    gts_by_class: Dict[int, Dict[str, List[Interval]]] = {}
    for vid, instances in ground_truths.items():
        for g in instances:
            gts_by_class.setdefault(g.label, {}).setdefault(vid, []).append(g.interval)
    if not gts_by_class:
        raise EvaluationError("ground truth set is empty")
    classes = sorted(gts_by_class)

    detections_by_class: Dict[int, List[Detection]] = {}
    for d in detections:
        detections_by_class.setdefault(d.label, []).append(d)
    ignored = sorted(set(detections_by_class) - set(classes))
    if ignored:
        log.debug(f"detections for classes absent from the ground truth ignored: {ignored}")

    result = MapResult(per_threshold={}, per_class={}, classes=classes)
    for t in thresholds:
        result.per_threshold[t], result.per_class[t] = _map_at(
            detections_by_class, gts_by_class, classes, t
        )
    if average_thresholds:
        maps = [
            result.per_threshold[t]
            if t in result.per_threshold
            else _map_at(detections_by_class, gts_by_class, classes, t)[0]
            for t in average_thresholds
        ]
        result.average_thresholds = tuple(average_thresholds)
        result.average_map = float(np.mean(maps))
    return result
