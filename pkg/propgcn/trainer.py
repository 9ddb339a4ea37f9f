"""Training loop: one mini-batch per video per epoch, drawn 1:6:1 from the
video's foreground, incomplete and background samples, pushed through both
branches with sampled aggregation, then a scheduled SGD step."""

import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from tqdm import tqdm

from propgcn.data import VideoRecord, build_proposals
from propgcn.errors import ConfigError, DivergenceError
from propgcn.gcn import clip_gradients, sgd_step
from propgcn.graph import GraphConfig, ProposalGraph, build_graph
from propgcn.heads import (
    BACKGROUND,
    FOREGROUND,
    INCOMPLETE,
    BatchTargets,
    HeadOutputGrads,
    LossConfig,
    TrainingSample,
    label_samples,
    multitask_loss_with_grad,
)
from propgcn.intervals import GroundTruthInstance, Proposal
from propgcn.model import ProposalModel

log = logging.getLogger(__name__)

STREAM_LEARNING_RATES = {"rgb": 0.001, "flow": 0.01}
DATASET_BATCH_SIZES = {"thumos": 32, "activitynet": 64}

KINDS = (FOREGROUND, INCOMPLETE, BACKGROUND)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    sample_ratio: Tuple[int, int, int] = (1, 6, 1)
    lr_initial: float = 0.001
    lr_decay_every: int = 15
    lr_decay_factor: float = 10.0
    num_samples: int = 4
    sample_neighbors: bool = True
    seed: int = 0
    momentum: float = 0.0
    clip_norm: Optional[float] = None
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sample_ratio", tuple(self.sample_ratio))
        if len(self.sample_ratio) != 3 or min(self.sample_ratio) < 1:
            raise ConfigError(f"sample_ratio must be three positive integers, got {self.sample_ratio}")
        if self.batch_size < 1 or self.batch_size % sum(self.sample_ratio):
            raise ConfigError(
                f"batch_size {self.batch_size} is not a multiple of the ratio sum {sum(self.sample_ratio)}"
            )
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr_initial < 0:
            raise ConfigError(f"lr_initial must be >= 0, got {self.lr_initial}")
        if self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_every must be >= 1 and lr_decay_factor positive")
        if self.num_samples < 1:
            raise ConfigError(f"num_samples must be >= 1, got {self.num_samples}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    @property
    def quotas(self) -> Tuple[int, int, int]:
        unit = self.batch_size // sum(self.sample_ratio)
        return tuple(unit * r for r in self.sample_ratio)


def lr_schedule(epoch: int, lr_initial: float, every: int = 15, factor: float = 10.0) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return lr_initial * factor ** -(epoch // every)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    ce: float
    reg: float
    com: float
    acc: float
    batches: int

    def line(self) -> str:
        return (
            f"{self.epoch}\t{self.lr:.6g}\t{self.loss:.6f}\t{self.ce:.6f}\t"
            f"{self.reg:.6f}\t{self.com:.6f}\t{self.acc:.4f}"
        )


@dataclass
class TrainState:
    epoch: int
    learning_rate: float
    model: ProposalModel
    rng: np.random.Generator
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    history: List[EpochMetrics] = field(default_factory=list)

    @classmethod
    def start(cls, model: ProposalModel, config: TrainConfig) -> "TrainState":
        return cls(
            epoch=0,
            learning_rate=config.lr_initial,
            model=model,
            rng=np.random.default_rng(config.seed),
        )


@dataclass
class PreparedVideo:
    """Everything a training step needs from one video."""

    video_id: str
    graph: ProposalGraph
    x: np.ndarray
    x_ext: np.ndarray
    samples: List[TrainingSample]

    @classmethod
    def from_proposals(
        cls,
        video_id: str,
        proposals: Sequence[Proposal],
        ground_truths: Sequence[GroundTruthInstance],
        graph_config: GraphConfig = GraphConfig(),
        loss_config: LossConfig = LossConfig(),
        capped: bool = True,
    ) -> "PreparedVideo":
        graph = build_graph(proposals, graph_config, capped=capped)
        samples = label_samples([p.interval for p in proposals], ground_truths, loss_config)
        return cls(
            video_id=video_id,
            graph=graph,
            x=np.stack([p.feature for p in proposals]).astype(np.float64),
            x_ext=np.stack([p.extended_feature for p in proposals]).astype(np.float64),
            samples=samples,
        )

    def counts(self) -> Dict[str, int]:
        return {kind: sum(s.kind == kind for s in self.samples) for kind in KINDS}


def prepare_videos(
    records: Sequence[VideoRecord],
    stream: str,
    graph_config: GraphConfig = GraphConfig(),
    loss_config: LossConfig = LossConfig(),
    threads: int = 1,
    capped: bool = True,
) -> List[PreparedVideo]:
    """Pool features, build graphs and label samples for every record.

    Videos are independent, so the work fans out over ``threads`` workers;
    output order follows ``records``.
    """
    def prepare(record: VideoRecord) -> PreparedVideo:
        proposals = build_proposals(record, stream)
        return PreparedVideo.from_proposals(
            record.video_id, proposals, record.ground_truths, graph_config, loss_config, capped
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            prepared = list(pool.map(prepare, records))
    else:
        prepared = [prepare(r) for r in records]

    for video in prepared:
        log.debug(f"{video.video_id}: {video.graph.num_nodes} proposals, samples {video.counts()}")
    return [v for v in prepared if v.graph.num_nodes]


def assemble_batch(
    samples: Sequence[TrainingSample],
    ratio: Tuple[int, int, int],
    batch_size: int,
    rng: np.random.Generator,
) -> List[TrainingSample]:
    """Draw one fg:inc:bg mini-batch from a single video's samples.

    A category with fewer samples than its quota is drawn with replacement.
    An empty category gives up its quota, and the batch shrinks.
    """
    unit, rest = divmod(batch_size, sum(ratio))
    if rest:
        raise ConfigError(f"batch_size {batch_size} is not a multiple of {sum(ratio)}")

    batch: List[TrainingSample] = []
    for kind, part in zip(KINDS, ratio):
        pool = [s for s in samples if s.kind == kind]
        quota = unit * part
        if not pool:
            log.debug(f"no {kind} samples, batch shrinks by {quota}")
            continue
        picks = rng.choice(len(pool), size=quota, replace=len(pool) < quota)
        batch.extend(pool[int(i)] for i in picks)
    return batch


def train_step(
    video: PreparedVideo,
    batch: Sequence[TrainingSample],
    state: TrainState,
    config: TrainConfig,
    loss_config: LossConfig,
):
    """One forward/backward/SGD step on a batch; returns the loss breakdown."""
    model = state.model
    ids = np.array([s.proposal_id for s in batch], dtype=np.int64)
    targets, rows = np.unique(ids, return_inverse=True)

    outputs, cache = model.forward(
        video.graph,
        video.x,
        video.x_ext,
        targets=targets,
        training=True,
        rng=state.rng,
        num_samples=config.num_samples,
        sample=config.sample_neighbors,
    )
    breakdown, sample_grads = multitask_loss_with_grad(
        outputs.take(rows), BatchTargets.from_samples(batch), loss_config
    )
    if not math.isfinite(breakdown.total):
        raise DivergenceError(
            "non-finite training loss",
            {"epoch": state.epoch, "video": video.video_id, "lr": state.learning_rate},
        )

    # repeated proposals share one forward row
    grads = HeadOutputGrads(
        logits=np.zeros_like(outputs.logits),
        completeness=np.zeros_like(outputs.completeness),
        offsets=np.zeros_like(outputs.offsets),
    )
    np.add.at(grads.logits, rows, sample_grads.logits)
    np.add.at(grads.completeness, rows, sample_grads.completeness)
    np.add.at(grads.offsets, rows, sample_grads.offsets)

    param_grads = model.backward(cache, grads)
    if config.clip_norm is not None:
        param_grads, norm = clip_gradients(param_grads, config.clip_norm)
        log.debug(f"gradient norm {norm:.4f}")
    updated = sgd_step(
        model.parameters(),
        param_grads,
        state.learning_rate,
        momentum=config.momentum,
        velocity=state.velocity,
    )
    model.load_parameters(updated)
    return breakdown


def train_epoch(
    videos: Sequence[PreparedVideo],
    state: TrainState,
    config: TrainConfig,
    loss_config: LossConfig = LossConfig(),
) -> EpochMetrics:
    state.learning_rate = lr_schedule(
        state.epoch, config.lr_initial, config.lr_decay_every, config.lr_decay_factor
    )
    totals = dict(loss=0.0, ce=0.0, reg=0.0, com=0.0)
    correct = count = batches = 0

    for v in state.rng.permutation(len(videos)):
        video = videos[int(v)]
        batch = assemble_batch(video.samples, config.sample_ratio, config.batch_size, state.rng)
        if not batch:
            log.warning(f"{video.video_id}: no labeled samples, skipped")
            continue
        breakdown = train_step(video, batch, state, config, loss_config)
        totals["loss"] += breakdown.total
        totals["ce"] += breakdown.ce
        totals["reg"] += breakdown.reg
        totals["com"] += breakdown.com
        correct += breakdown.correct
        count += breakdown.count
        batches += 1

    denom = max(batches, 1)
    metrics = EpochMetrics(
        epoch=state.epoch,
        lr=state.learning_rate,
        loss=totals["loss"] / denom,
        ce=totals["ce"] / denom,
        reg=totals["reg"] / denom,
        com=totals["com"] / denom,
        acc=correct / count if count else 0.0,
        batches=batches,
    )
    state.history.append(metrics)
    state.epoch += 1
    return metrics


def train(
    videos: Sequence[PreparedVideo],
    state: TrainState,
    config: TrainConfig,
    loss_config: LossConfig = LossConfig(),
    out: Optional[TextIO] = None,
    log_file: Optional[TextIO] = None,
    quiet: bool = False,
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Run epochs from ``state.epoch`` up to ``config.epochs``.

    Each epoch writes its tab-separated log line to ``out`` (stdout by
    default) and to ``log_file`` when given.
    """
    if not videos:
        raise ConfigError("no trainable videos")
    out = out or sys.stdout
    epochs = range(state.epoch, config.epochs)
    for _ in tqdm(epochs, desc="train", unit="epoch", disable=quiet or None, file=sys.stderr):
        metrics = train_epoch(videos, state, config, loss_config)
        line = metrics.line()
        print(line, file=out)
        if log_file is not None:
            print(line, file=log_file)
            log_file.flush()
        if on_epoch is not None:
            on_epoch(state)
    return state
