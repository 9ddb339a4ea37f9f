"""Experiment runners: the fit/predict pipeline shared with the CLI, the
ablation study over model variants, and per-iteration timing."""

import io
import logging
import time
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
from tqdm import tqdm

from propgcn.config import Settings, build_settings
from propgcn.data import VideoRecord, external_scores_for
from propgcn.errors import ConfigError, DataFormatError
from propgcn.evaluation import (
    Detection,
    VideoPredictions,
    detect_video,
    infer_video,
    mean_average_precision,
)
from propgcn.model import ProposalModel
from propgcn.synthetic import SyntheticSpec, generate_videos
from propgcn.trainer import PreparedVideo, TrainState, assemble_batch, prepare_videos, train, train_step

log = logging.getLogger(__name__)

THETA_CTX_SWEEP = (0.1, 0.3, 0.5, 0.7, 0.9)

VARIANTS: Dict[str, Dict[str, Any]] = {
    "gcn": {},
    "mlp": {"mode": "mlp"},
    "mean-pool": {"mode": "mean-pool"},
    "mlp+gcn": {"mode1": "mlp", "mode2": "gcn"},
    "gcn+mlp": {"mode1": "gcn", "mode2": "mlp"},
    "mean-pool+gcn": {"mode1": "mean-pool", "mode2": "gcn"},
    "gcn+mean-pool": {"mode1": "gcn", "mode2": "mean-pool"},
    "no-contextual": {"use_contextual": False},
    "no-surrounding": {"use_surrounding": False},
    "no-self-add": {"self_add": False},
    "no-regression": {"use_regression": False},
    **{f"theta_ctx={t}": {"theta_ctx": t} for t in THETA_CTX_SWEEP},
}
DEFAULT_VARIANTS = ("gcn", "mlp", "mean-pool", "no-contextual", "no-surrounding", "no-regression")

# hidden instances are only nameable through neighbors, loose proposals only
# clear tIoU 0.5 once their boundaries are regressed
ABLATION_SPEC = SyntheticSpec(num_videos=10, proposals_per_video=30, context=True)
ABLATION_PROFILE: Dict[str, Any] = {"stream": "flow"}


def num_classes_of(records: Sequence[VideoRecord]) -> int:
    labels = [g.label for r in records for g in r.ground_truths]
    if not labels:
        raise DataFormatError("<dataset>", "no ground-truth annotations to infer the class count from")
    return max(labels)


def fit_model(
    records: Sequence[VideoRecord],
    settings: Settings,
    num_classes: int,
    stream: Optional[str] = None,
    out=None,
    log_file=None,
    quiet: bool = False,
    state: Optional[TrainState] = None,
    on_epoch=None,
) -> TrainState:
    """Prepare the videos of one stream and train a fresh (or resumed) model."""
    stream = stream or settings.stream
    videos = prepare_videos(
        records, stream, settings.graph, settings.loss, threads=settings.train.threads
    )
    if state is None:
        feature_dim = videos[0].x.shape[1] if videos else 0
        if feature_dim == 0:
            raise ConfigError("no trainable videos")
        rng = np.random.default_rng(settings.train.seed)
        model = ProposalModel.initialize(feature_dim, num_classes, settings.stack, rng)
        model.meta = {"stream": stream, "num_classes": num_classes}
        state = TrainState.start(model, settings.train)
    return train(
        videos,
        state,
        settings.train,
        settings.loss,
        out=out,
        log_file=log_file,
        quiet=quiet,
        on_epoch=on_epoch,
    )


def predict(
    records: Sequence[VideoRecord], model: ProposalModel, settings: Settings, stream: Optional[str] = None
) -> List[VideoPredictions]:
    stream = stream or model.meta.get("stream", settings.stream)
    videos = prepare_videos(
        records,
        stream,
        settings.graph,
        settings.loss,
        threads=settings.train.threads,
        capped=settings.graph.cap_in_eval,
    )
    durations = {r.video_id: r.duration for r in records}
    return [
        infer_video(v.graph, v.x, v.x_ext, model, v.video_id, durations[v.video_id])
        for v in videos
    ]


def detect(
    predictions: Sequence[VideoPredictions],
    settings: Settings,
    external: Optional[Mapping[str, np.ndarray]] = None,
) -> List[Detection]:
    detections: List[Detection] = []
    for p in predictions:
        scores = external_scores_for(external, p.video_id) if external is not None else None
        detections.extend(detect_video(p, settings.eval, scores))
    return detections


def run_variant(
    records: Sequence[VideoRecord],
    base: Mapping[str, Any],
    overrides: Mapping[str, Any],
    seed: int,
    threshold: float = 0.5,
) -> float:
    """Train and evaluate one variant on ``records``; returns mAP at ``threshold``."""
    settings = build_settings(base, overrides, {"seed": seed})
    num_classes = num_classes_of(records)
    state = fit_model(records, settings, num_classes, out=io.StringIO(), quiet=True)
    detections = detect(predict(records, state.model, settings), settings)
    gts = {r.video_id: r.ground_truths for r in records}
    result = mean_average_precision(detections, gts, [threshold], average_thresholds=())
    return result.per_threshold[threshold]


def run_ablation(
    records: Sequence[VideoRecord],
    variants: Sequence[str] = DEFAULT_VARIANTS,
    seeds: Sequence[int] = (0,),
    base: Optional[Mapping[str, Any]] = None,
    threshold: float = 0.5,
    quiet: bool = False,
) -> Dict[str, List[float]]:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}, expected some of {sorted(VARIANTS)}")
    base = dict(base or {})
    results: Dict[str, List[float]] = {v: [] for v in variants}
    runs = [(v, s) for v in variants for s in seeds]
    for variant, seed in tqdm(runs, desc="ablate", unit="run", disable=quiet or None):
        value = run_variant(records, base, VARIANTS[variant], seed, threshold)
        log.info(f"{variant} seed={seed}: mAP@{threshold:.2f} = {value:.4f}")
        results[variant].append(value)
    return results


def bench_video(num_proposals: int = 1000, seed: int = 0, feature_dim: int = 32) -> VideoRecord:
    spec = SyntheticSpec(
        num_videos=1,
        num_classes=3,
        proposals_per_video=num_proposals,
        feature_dim=feature_dim,
        instances_per_video=10,
        streams=("rgb",),
        seed=seed,
    )
    return generate_videos(spec)[0]


def time_iterations(
    video: PreparedVideo, model: ProposalModel, settings: Settings, iterations: int
) -> float:
    """Mean wall-clock seconds per training iteration, after one warm-up step."""
    state = TrainState.start(model, settings.train)
    config = settings.train

    def step():
        batch = assemble_batch(video.samples, config.sample_ratio, config.batch_size, state.rng)
        train_step(video, batch, state, config, settings.loss)

    step()
    started = time.perf_counter()
    for _ in range(iterations):
        step()
    return (time.perf_counter() - started) / iterations


def run_bench(
    num_proposals: int = 1000,
    num_samples_list: Sequence[int] = (1, 2, 3, 4, 5, 10),
    modes: Sequence[str] = ("gcn", "mlp"),
    iterations: int = 5,
    seed: int = 0,
    base: Optional[Mapping[str, Any]] = None,
    quiet: bool = False,
) -> List[Dict[str, object]]:
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    record = bench_video(num_proposals, seed)
    num_classes = num_classes_of([record])

    prepared = build_settings(dict(base or {}), {"seed": seed})
    video = prepare_videos([record], "rgb", prepared.graph, prepared.loss)[0]

    timings = []
    runs = [(m, n) for m in modes for n in num_samples_list]
    for mode, num_samples in tqdm(runs, desc="bench", unit="run", disable=quiet or None):
        settings = build_settings(dict(base or {}), {"mode": mode, "num_samples": num_samples, "seed": seed})
        model = ProposalModel.initialize(
            video.x.shape[1], num_classes, settings.stack, np.random.default_rng(seed)
        )
        seconds = time_iterations(video, model, settings, iterations)
        log.debug(f"{mode} N_s={num_samples}: {seconds:.4f} s/iter")
        timings.append(
            {"mode": mode, "num_samples": num_samples, "seconds_per_iter": seconds, "iterations": iterations}
        )
    return timings
