"""Interval algebra on the temporal axis.

Times are plain reals (seconds by the file convention of ``propgcn.data``).
Everything here is a pure function of immutable values.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from propgcn.errors import DimensionError, IntervalError


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        # numpy scalars would leak their repr into the text formats
        try:
            object.__setattr__(self, "start", float(self.start))
            object.__setattr__(self, "end", float(self.end))
        except (TypeError, ValueError):
            raise IntervalError(f"interval bounds must be reals, got [{self.start!r}, {self.end!r}]") from None
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise IntervalError(f"non-finite interval [{self.start}, {self.end}]")
        if not self.end > self.start:
            raise IntervalError(
                f"interval must have positive length, got [{self.start}, {self.end}]"
            )

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    @property
    def length(self) -> float:
        return self.end - self.start

    @classmethod
    def from_center(cls, center: float, length: float) -> "Interval":
        return cls(center - 0.5 * length, center + 0.5 * length)


@dataclass(frozen=True)
class GroundTruthInstance:
    interval: Interval
    label: int

    def __post_init__(self):
        object.__setattr__(self, "label", int(self.label))
        if self.label < 1:
            raise IntervalError(
                f"ground-truth label must be >= 1 (0 is background), got {self.label}"
            )


@dataclass(frozen=True)
class Offset:
    center_offset: float
    length_offset: float

    def __post_init__(self):
        if not (
            math.isfinite(self.center_offset) and math.isfinite(self.length_offset)
        ):
            raise IntervalError(
                f"offset must be finite, got ({self.center_offset}, {self.length_offset})"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.center_offset, self.length_offset], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Proposal:
    id: int
    interval: Interval
    feature: np.ndarray
    extended_feature: np.ndarray
    gt: Optional[GroundTruthInstance] = None
    confidence: float = 1.0

    def __post_init__(self):
        if self.feature.ndim != 1 or self.extended_feature.ndim != 1:
            raise DimensionError(f"proposal {self.id}: features must be vectors")
        if self.extended_feature.shape[0] != 3 * self.feature.shape[0]:
            raise DimensionError(
                f"proposal {self.id}: extended feature has {self.extended_feature.shape[0]} "
                f"dims, expected {3 * self.feature.shape[0]}"
            )


def _intersection(a: Interval, b: Interval) -> float:
    return max(0.0, min(a.end, b.end) - max(a.start, b.start))


def tiou(a: Interval, b: Interval) -> float:
    """Temporal intersection over union; union is len(a) + len(b) - I."""
    inter = _intersection(a, b)
    union = a.length + b.length - inter
    return inter / union


def surround_distance(a: Interval, b: Interval) -> float:
    """Center distance normalised by the union measure used in tiou."""
    inter = _intersection(a, b)
    union = a.length + b.length - inter
    return abs(a.center - b.center) / union


def overlap(proposal: Interval, gt: Interval, mode: str = "proposal") -> float:
    """Fraction of the proposal (or of the ground truth) covered by the other."""
    inter = _intersection(proposal, gt)
    if mode == "proposal":
        return inter / proposal.length
    if mode == "ground_truth":
        return inter / gt.length
    raise ValueError(f"unknown overlap mode: {mode}")


def encode_offset(proposal: Interval, gt: Interval) -> Offset:
    return Offset(
        (proposal.center - gt.center) / proposal.length,
        math.log(proposal.length / gt.length),
    )


def decode_offset(proposal: Interval, offset: Offset) -> Interval:
    """Inverse of encode_offset: decode(p, encode(p, g)) == g."""
    try:
        length = proposal.length * math.exp(-offset.length_offset)
    except OverflowError:
        raise IntervalError(
            f"length offset {offset.length_offset} overflows when decoded"
        ) from None
    if not (length > 0.0 and math.isfinite(length)):
        raise IntervalError(f"decoded interval has invalid length {length}")
    center = proposal.center - offset.center_offset * proposal.length
    return Interval.from_center(center, length)


# Vectorised forms used by the graph builder, the labeler and NMS.


def as_bounds(intervals: Sequence[Interval]) -> Tuple[np.ndarray, np.ndarray]:
    starts = np.array([iv.start for iv in intervals], dtype=np.float64)
    ends = np.array([iv.end for iv in intervals], dtype=np.float64)
    return starts, ends


def intersection_matrix(
    starts_a: np.ndarray, ends_a: np.ndarray, starts_b: np.ndarray, ends_b: np.ndarray
) -> np.ndarray:
    lo = np.maximum(starts_a[:, None], starts_b[None, :])
    hi = np.minimum(ends_a[:, None], ends_b[None, :])
    return np.maximum(0.0, hi - lo)


def tiou_matrix(
    starts_a: np.ndarray, ends_a: np.ndarray, starts_b: np.ndarray, ends_b: np.ndarray
) -> np.ndarray:
    inter = intersection_matrix(starts_a, ends_a, starts_b, ends_b)
    union = (ends_a - starts_a)[:, None] + (ends_b - starts_b)[None, :] - inter
    return inter / union


def surround_distance_matrix(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    inter = intersection_matrix(starts, ends, starts, ends)
    lengths = ends - starts
    union = lengths[:, None] + lengths[None, :] - inter
    centers = 0.5 * (starts + ends)
    return np.abs(centers[:, None] - centers[None, :]) / union


def overlap_matrix(
    starts_p: np.ndarray,
    ends_p: np.ndarray,
    starts_g: np.ndarray,
    ends_g: np.ndarray,
    mode: str = "proposal",
) -> np.ndarray:
    inter = intersection_matrix(starts_p, ends_p, starts_g, ends_g)
    if mode == "proposal":
        return inter / (ends_p - starts_p)[:, None]
    if mode == "ground_truth":
        return inter / (ends_g - starts_g)[None, :]
    raise ValueError(f"unknown overlap mode: {mode}")
