"""Prediction heads, training-sample labeling and the multi-task loss.

The action head sits on the classification branch output and has a
background slot at index 0. Completeness and regression heads sit on the
boundary branch output and have one slot per action class (class m uses slot
m - 1).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from propgcn.errors import ConfigError, DimensionError
from propgcn.intervals import (
    GroundTruthInstance,
    Interval,
    Offset,
    as_bounds,
    encode_offset,
    overlap_matrix,
    tiou_matrix,
)

log = logging.getLogger(__name__)

FOREGROUND = "foreground"
INCOMPLETE = "incomplete"
BACKGROUND = "background"

# (fg tIoU min, incomplete overlap min, incomplete tIoU max, background tIoU max)
THRESHOLD_PROFILES: Dict[str, Tuple[float, float, float, float]] = {
    "thumos": (0.7, 0.7, 0.3, 0.0),
    "activitynet": (0.7, 0.7, 0.6, 0.1),
}


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    fg_iou_min: float = 0.7
    incomplete_overlap_min: float = 0.7
    incomplete_iou_max: float = 0.3
    bg_iou_max: float = 0.0
    overlap_mode: str = "proposal"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.incomplete_iou_max < self.fg_iou_min:
            raise ConfigError(
                f"incomplete tIoU max ({self.incomplete_iou_max}) must be below "
                f"foreground tIoU min ({self.fg_iou_min})"
            )
        if not self.bg_iou_max < self.incomplete_iou_max:
            raise ConfigError(
                f"background tIoU max ({self.bg_iou_max}) must be below "
                f"incomplete tIoU max ({self.incomplete_iou_max})"
            )
        if self.overlap_mode not in ("proposal", "ground_truth"):
            raise ConfigError(f"unknown overlap_mode {self.overlap_mode!r}")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "LossConfig":
        try:
            t1, t2, t3, t4 = THRESHOLD_PROFILES[profile]
        except KeyError:
            raise ConfigError(
                f"unknown threshold profile {profile!r}, expected one of {sorted(THRESHOLD_PROFILES)}"
            ) from None
        values = dict(
            fg_iou_min=t1, incomplete_overlap_min=t2, incomplete_iou_max=t3, bg_iou_max=t4
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class HeadParams:
    action_w: np.ndarray  # (d1, C + 1)
    action_b: np.ndarray
    completeness_w: np.ndarray  # (d2, C)
    completeness_b: np.ndarray
    regression_w: np.ndarray  # (d2, 2C), class m at columns 2(m-1), 2(m-1)+1
    regression_b: np.ndarray

    def __post_init__(self):
        num_classes = self.action_w.shape[1] - 1
        if self.completeness_w.shape[1] != num_classes:
            raise DimensionError(
                f"completeness head has {self.completeness_w.shape[1]} outputs, expected {num_classes}"
            )
        if self.regression_w.shape[1] != 2 * num_classes:
            raise DimensionError(
                f"regression head has {self.regression_w.shape[1]} outputs, expected {2 * num_classes}"
            )
        if self.completeness_w.shape[0] != self.regression_w.shape[0]:
            raise DimensionError("completeness and regression heads must share their input width")

    @property
    def num_classes(self) -> int:
        return self.action_w.shape[1] - 1

    @classmethod
    def initialize(
        cls, d1: int, d2: int, num_classes: int, rng: np.random.Generator
    ) -> "HeadParams":
        def uniform(d_in, d_out):
            bound = math.sqrt(6.0 / (d_in + d_out))
            return rng.uniform(-bound, bound, size=(d_in, d_out))

        return cls(
            action_w=uniform(d1, num_classes + 1),
            action_b=np.zeros(num_classes + 1),
            completeness_w=uniform(d2, num_classes),
            completeness_b=np.zeros(num_classes),
            regression_w=uniform(d2, 2 * num_classes),
            regression_b=np.zeros(2 * num_classes),
        )

    @classmethod
    def zeros(cls, d1: int, d2: int, num_classes: int) -> "HeadParams":
        return cls(
            action_w=np.zeros((d1, num_classes + 1)),
            action_b=np.zeros(num_classes + 1),
            completeness_w=np.zeros((d2, num_classes)),
            completeness_b=np.zeros(num_classes),
            regression_w=np.zeros((d2, 2 * num_classes)),
            regression_b=np.zeros(2 * num_classes),
        )

    def named_parameters(self, prefix: str = "heads") -> Dict[str, np.ndarray]:
        return {
            f"{prefix}.action_w": self.action_w,
            f"{prefix}.action_b": self.action_b,
            f"{prefix}.completeness_w": self.completeness_w,
            f"{prefix}.completeness_b": self.completeness_b,
            f"{prefix}.regression_w": self.regression_w,
            f"{prefix}.regression_b": self.regression_b,
        }


def _check_width(features: np.ndarray, weight: np.ndarray, head: str):
    if features.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"{head} head expects {weight.shape[0]}-dim inputs, got {features.shape[-1]}"
        )


def action_logits(features: np.ndarray, heads: HeadParams) -> np.ndarray:
    _check_width(features, heads.action_w, "action")
    return features @ heads.action_w + heads.action_b


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def classify_actions(features: np.ndarray, heads: HeadParams) -> np.ndarray:
    """FC + softmax over N_class + 1 outputs (slot 0 is background)."""
    return softmax(action_logits(features, heads))


def regress_boundaries(features: np.ndarray, heads: HeadParams) -> np.ndarray:
    """Per-class (o_c, o_l) predictions, shape (..., N_class, 2)."""
    _check_width(features, heads.regression_w, "regression")
    flat = features @ heads.regression_w + heads.regression_b
    return flat.reshape(*flat.shape[:-1], heads.num_classes, 2)


def score_completeness(features: np.ndarray, heads: HeadParams) -> np.ndarray:
    """Unbounded per-class completeness scores."""
    _check_width(features, heads.completeness_w, "completeness")
    return features @ heads.completeness_w + heads.completeness_b


def smooth_l1(x):
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def hinge_completeness(target, score):
    out = np.maximum(0.0, 1.0 - np.asarray(target) * np.asarray(score))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TrainingSample:
    proposal_id: int
    kind: str
    class_target: int
    completeness_target: int
    regression_target: Optional[Offset] = None

    def __post_init__(self):
        if self.kind == BACKGROUND and (self.class_target != 0 or self.regression_target):
            raise ConfigError("background samples carry class 0 and no regression target")
        if self.kind == FOREGROUND and (
            self.completeness_target != 1 or self.regression_target is None
        ):
            raise ConfigError("foreground samples are complete and carry a regression target")
        if self.kind == INCOMPLETE and self.completeness_target != -1:
            raise ConfigError("incomplete samples carry completeness target -1")


def label_samples(
    proposals: Sequence[Interval],
    ground_truths: Sequence[GroundTruthInstance],
    config: LossConfig = LossConfig(),
) -> List[TrainingSample]:
    """Tag proposals foreground / incomplete / background by best tIoU and
    best overlap against the video's ground truth; unmatched proposals are
    dropped. Precedence is foreground, incomplete, background.
    """
    if not proposals:
        return []
    if not ground_truths:
        return [TrainingSample(i, BACKGROUND, 0, -1) for i in range(len(proposals))]

    ps, pe = as_bounds(proposals)
    gs, ge = as_bounds([g.interval for g in ground_truths])
    iou = tiou_matrix(ps, pe, gs, ge)
    ol = overlap_matrix(ps, pe, gs, ge, config.overlap_mode)
    best_iou_gt = np.argmax(iou, axis=1)
    best_ol_gt = np.argmax(ol, axis=1)

    samples: List[TrainingSample] = []
    for i, proposal in enumerate(proposals):
        best_iou = iou[i, best_iou_gt[i]]
        best_ol = ol[i, best_ol_gt[i]]
        if best_iou >= config.fg_iou_min:
            gt = ground_truths[best_iou_gt[i]]
            samples.append(
                TrainingSample(
                    i, FOREGROUND, gt.label, 1, encode_offset(proposal, gt.interval)
                )
            )
        elif best_ol >= config.incomplete_overlap_min and best_iou <= config.incomplete_iou_max:
            gt = ground_truths[best_ol_gt[i]]
            samples.append(TrainingSample(i, INCOMPLETE, gt.label, -1))
        elif best_iou <= config.bg_iou_max:
            samples.append(TrainingSample(i, BACKGROUND, 0, -1))
    return samples


@dataclass
class HeadOutputs:
    logits: np.ndarray  # (B, C + 1)
    completeness: np.ndarray  # (B, C)
    offsets: np.ndarray  # (B, C, 2)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def take(self, rows: np.ndarray) -> "HeadOutputs":
        return HeadOutputs(self.logits[rows], self.completeness[rows], self.offsets[rows])


@dataclass
class HeadOutputGrads:
    logits: np.ndarray
    completeness: np.ndarray
    offsets: np.ndarray


@dataclass
class BatchTargets:
    class_target: np.ndarray  # (B,) ints
    completeness_target: np.ndarray  # (B,) +-1
    regression_target: np.ndarray  # (B, 2)
    has_regression: np.ndarray  # (B,) bool

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "BatchTargets":
        reg = np.zeros((len(samples), 2))
        has = np.zeros(len(samples), dtype=bool)
        for b, s in enumerate(samples):
            if s.regression_target is not None:
                reg[b] = s.regression_target.as_array()
                has[b] = True
        return cls(
            class_target=np.array([s.class_target for s in samples], dtype=np.int64),
            completeness_target=np.array([s.completeness_target for s in samples], dtype=np.float64),
            regression_target=reg,
            has_regression=has,
        )


@dataclass
class LossBreakdown:
    total: float
    ce: float
    reg: float
    com: float
    correct: int
    count: int


def multitask_loss_with_grad(
    outputs: HeadOutputs, targets: BatchTargets, config: LossConfig = LossConfig()
) -> Tuple[LossBreakdown, HeadOutputGrads]:
    """Summed CE over all samples, lambda1 * smooth-L1 on foreground and
    lambda2 * hinge on every non-background sample, with regression and
    completeness slots picked by the target class.
    """
    B = len(targets.class_target)
    if B == 0:
        raise ConfigError("multitask_loss needs a non-empty batch")
    if outputs.logits.shape[0] != B:
        raise DimensionError(f"{outputs.logits.shape[0]} predictions for {B} targets")

    y = targets.class_target
    rows = np.arange(B)
    logp = log_softmax(outputs.logits)
    ce = float(-np.sum(logp[rows, y]))

    d_logits = np.exp(logp)
    d_logits[rows, y] -= 1.0
    d_comp = np.zeros_like(outputs.completeness)
    d_off = np.zeros_like(outputs.offsets)

    positive = y >= 1
    slot = y - 1

    reg_rows = rows[positive & targets.has_regression]
    diff = outputs.offsets[reg_rows, slot[reg_rows]] - targets.regression_target[reg_rows]
    reg = float(np.sum(smooth_l1(diff))) if len(reg_rows) else 0.0
    d_off[reg_rows, slot[reg_rows]] = config.lambda1 * _smooth_l1_grad(diff)

    com_rows = rows[positive]
    e = targets.completeness_target[com_rows]
    c = outputs.completeness[com_rows, slot[com_rows]]
    margin = 1.0 - e * c
    com = float(np.sum(np.maximum(0.0, margin))) if len(com_rows) else 0.0
    d_comp[com_rows, slot[com_rows]] = config.lambda2 * np.where(margin > 0.0, -e, 0.0)

    correct = int(np.sum(np.argmax(outputs.logits, axis=1) == y))
    breakdown = LossBreakdown(
        total=ce + config.lambda1 * reg + config.lambda2 * com,
        ce=ce,
        reg=reg,
        com=com,
        correct=correct,
        count=B,
    )
    return breakdown, HeadOutputGrads(d_logits, d_comp, d_off)


def multitask_loss(
    outputs: HeadOutputs, targets: BatchTargets, config: LossConfig = LossConfig()
) -> LossBreakdown:
    return multitask_loss_with_grad(outputs, targets, config)[0]


def heads_forward(h1: np.ndarray, h2: np.ndarray, heads: HeadParams) -> HeadOutputs:
    return HeadOutputs(
        logits=action_logits(h1, heads),
        completeness=score_completeness(h2, heads),
        offsets=regress_boundaries(h2, heads),
    )


def heads_backward(
    h1: np.ndarray, h2: np.ndarray, heads: HeadParams, grads: HeadOutputGrads
) -> Tuple[Dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Returns (head parameter grads, d h1, d h2)."""
    d_reg = grads.offsets.reshape(grads.offsets.shape[0], -1)
    param_grads = {
        "heads.action_w": h1.T @ grads.logits,
        "heads.action_b": grads.logits.sum(axis=0),
        "heads.completeness_w": h2.T @ grads.completeness,
        "heads.completeness_b": grads.completeness.sum(axis=0),
        "heads.regression_w": h2.T @ d_reg,
        "heads.regression_b": d_reg.sum(axis=0),
    }
    d_h1 = grads.logits @ heads.action_w.T
    d_h2 = grads.completeness @ heads.completeness_w.T + d_reg @ heads.regression_w.T
    return param_grads, d_h1, d_h2
