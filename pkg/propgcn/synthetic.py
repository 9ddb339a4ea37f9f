"""Seeded synthetic datasets with known action instances.

Feature space is cut into blocks: one for background, one generic "action"
block, then one per class. Segments inside an instance carry the class block
(or, with probability ``ambiguity``, only the generic block), segments
outside carry the background block. Each stream sees the same layout under
its own fixed permutation of dimensions.

With ``context`` set the layout changes: every video holds a single class,
instances carry the generic block next to their class block, and a
``hidden_fraction`` of instances show the generic block alone. A hidden
instance can only be named through the instance next to it, which sits
within surrounding-edge distance but beyond the reach of its extended
features. A ``loose_fraction`` of the foreground proposals of the first and
last instance are pushed outward by up to ``max_displacement`` of the
instance length.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import yaml

from propgcn.data import VideoRecord, write_dataset, write_external_scores, write_ground_truth
from propgcn.errors import ConfigError
from propgcn.intervals import GroundTruthInstance, Interval, tiou

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 10
    num_classes: int = 3
    proposals_per_video: int = 20
    feature_dim: int = 16
    separation: float = 1.0
    noise: float = 0.1
    seed: int = 0
    instances_per_video: int = 2
    segment_length: float = 2.56
    streams: Tuple[str, ...] = ("rgb", "flow")
    ambiguity: float = 0.0
    context: bool = False
    hidden_fraction: float = 0.5
    loose_fraction: float = 0.5
    max_displacement: float = 0.45

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        if min(self.num_videos, self.num_classes, self.instances_per_video) < 1:
            raise ConfigError("num_videos, num_classes and instances_per_video must be >= 1")
        if self.proposals_per_video < 3:
            raise ConfigError("proposals_per_video must be >= 3 (one of each sample kind)")
        if self.feature_dim < self.num_classes + 2:
            raise ConfigError(
                f"feature_dim must be >= num_classes + 2 = {self.num_classes + 2}, got {self.feature_dim}"
            )
        if self.separation <= 0 or self.noise < 0 or self.segment_length <= 0:
            raise ConfigError("separation and segment_length must be positive, noise non-negative")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ConfigError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        for name in ("hidden_fraction", "loose_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.05 < self.max_displacement <= 0.5:
            raise ConfigError(f"max_displacement must lie in (0.05, 0.5], got {self.max_displacement}")
        if not self.streams:
            raise ConfigError("at least one stream is required")

    @classmethod
    def from_yaml(cls, path) -> "SyntheticSpec":
        try:
            with open(path) as f:
                values = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"{path}: cannot read synthetic spec: {e.strerror or e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a mapping of SyntheticSpec fields")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown synthetic spec keys {unknown}")
        return cls(**values)

    def to_yaml(self) -> str:
        values = asdict(self)
        values["streams"] = list(self.streams)
        return yaml.safe_dump(values, sort_keys=False)


def prototypes(spec: SyntheticSpec) -> np.ndarray:
    """(num_classes + 2, feature_dim) non-negative block prototypes.

    Row 0 is background, row 1 the generic action block, row m + 1 class m.
    """
    blocks = spec.num_classes + 2
    width = spec.feature_dim // blocks
    protos = np.zeros((blocks, spec.feature_dim))
    for b in range(blocks):
        protos[b, b * width : (b + 1) * width] = spec.separation
    return protos


def _layout(spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[int, List[Tuple[int, int, int]]]:
    """Alternating gaps and instances in whole segments: (num_segments, [(first, last+1, label)])."""
    position = 0
    instances = []
    for _ in range(spec.instances_per_video):
        position += int(rng.integers(6, 13))
        length = int(rng.integers(6, 13))
        label = int(rng.integers(1, spec.num_classes + 1))
        instances.append((position, position + length, label))
        position += length
    position += int(rng.integers(6, 13))
    return position, instances


# segments kept free of proposals at the outer ends of a context layout
OUTER_BACKGROUND = 16


def _context_layout(
    spec: SyntheticSpec, rng: np.random.Generator
) -> Tuple[int, List[Tuple[int, int, int]], np.ndarray]:
    """Single-class layout: (num_segments, [(first, last+1, label)], hidden flags).

    Inner gaps exceed what the extended features of either neighbor cover,
    yet keep the two instances within surrounding-edge distance. The outer
    gaps are long enough that background proposals placed in their far ends
    never qualify as surrounding neighbors of an instance.
    """
    n = spec.instances_per_video
    lengths = [int(x) for x in rng.integers(12, 17, size=n)]
    label = int(rng.integers(1, spec.num_classes + 1))
    hidden = rng.random(n) < spec.hidden_fraction
    if hidden.all():
        hidden[int(rng.integers(n))] = False

    position = int(rng.integers(40, 45))
    instances = []
    for k, length in enumerate(lengths):
        if k:
            position += math.ceil(0.65 * max(lengths[k - 1], length)) + 1
        instances.append((position, position + length, label))
        position += length
    position += int(rng.integers(40, 45))
    return position, instances, hidden


def _outward(k: int, n: int, rng: np.random.Generator) -> int:
    """Direction that moves instance k away from its neighbors, 0 for inner ones."""
    if n == 1:
        return 1 if rng.random() < 0.5 else -1
    if k == 0:
        return -1
    return 1 if k == n - 1 else 0


def _displaced(gt: Interval, direction: int, max_displacement: float, rng: np.random.Generator) -> Interval:
    shift = direction * rng.uniform(0.05, max_displacement) * gt.length
    return Interval(gt.start + shift, gt.end + shift)


def _split_counts(total: int) -> Tuple[int, int, int]:
    fg = max(1, total // 3)
    inc = max(1, total // 3)
    return fg, inc, total - fg - inc


def _foreground(gt: Interval, rng: np.random.Generator) -> Interval:
    for _ in range(50):
        jitter = rng.uniform(-0.1, 0.1, size=2) * gt.length
        candidate = Interval(gt.start + jitter[0], gt.end + jitter[1])
        if candidate.start >= 0 and tiou(candidate, gt) >= 0.75:
            return candidate
    return gt


def _incomplete(gt: Interval, rng: np.random.Generator) -> Interval:
    length = rng.uniform(0.15, 0.28) * gt.length
    start = gt.start + rng.uniform(0.0, gt.length - length)
    return Interval(start, start + length)


def _background(gap: Tuple[float, float], rng: np.random.Generator) -> Interval:
    lo, hi = gap
    length = rng.uniform(0.3, 1.0) * (hi - lo)
    start = lo + rng.uniform(0.0, hi - lo - length)
    return Interval(start, start + length)


def generate_videos(spec: SyntheticSpec) -> List[VideoRecord]:
    rng = np.random.default_rng(spec.seed)
    protos = prototypes(spec)
    perms = {stream: rng.permutation(spec.feature_dim) for stream in spec.streams}
    seg = spec.segment_length

    records = []
    for v in range(spec.num_videos):
        if spec.context:
            num_segments, layout, hidden = _context_layout(spec, rng)
        else:
            num_segments, layout = _layout(spec, rng)
            hidden = np.zeros(len(layout), dtype=bool)
        duration = num_segments * seg

        rows = np.zeros(num_segments, dtype=np.int64)
        gts = []
        for k, (first, stop, label) in enumerate(layout):
            inside = np.arange(first, stop)
            generic = rng.random(len(inside)) < spec.ambiguity
            rows[inside] = np.where(generic | hidden[k], 1, label + 1)
            gts.append(GroundTruthInstance(Interval(first * seg, stop * seg), label))

        clean = protos[rows]
        if spec.context:
            clean[rows > 1] = np.maximum(clean[rows > 1], protos[1])
        features = {}
        for stream in spec.streams:
            noisy = clean + spec.noise * rng.standard_normal((num_segments, spec.feature_dim))
            features[stream] = np.maximum(noisy, 0.0)[:, perms[stream]].astype(np.float32)

        if spec.context:
            outer = OUTER_BACKGROUND * seg
            gaps = [(0.0, outer), (duration - outer, duration)]
        else:
            edges = [0] + [x for first, stop, _ in layout for x in (first, stop)] + [num_segments]
            gaps = [(edges[k] * seg, edges[k + 1] * seg) for k in range(0, len(edges), 2)]

        n_fg, n_inc, n_bg = _split_counts(spec.proposals_per_video)
        proposals = []
        for _ in range(n_fg):
            k = int(rng.integers(len(gts)))
            direction = _outward(k, len(gts), rng) if spec.context else 0
            if direction and rng.random() < spec.loose_fraction:
                proposals.append(_displaced(gts[k].interval, direction, spec.max_displacement, rng))
            else:
                proposals.append(_foreground(gts[k].interval, rng))
        for _ in range(n_inc):
            proposals.append(_incomplete(gts[int(rng.integers(len(gts)))].interval, rng))
        for _ in range(n_bg):
            proposals.append(_background(gaps[int(rng.integers(len(gaps)))], rng))
        proposals = [
            Interval(max(p.start, 0.0), min(p.end, duration)) for p in proposals
        ]
        order = rng.permutation(len(proposals))
        proposals = [proposals[i] for i in order]
        confidences = rng.uniform(0.5, 1.0, size=len(proposals)).tolist()

        records.append(
            VideoRecord(
                video_id=f"video_{v:04d}",
                duration=duration,
                features=features,
                proposals=proposals,
                confidences=confidences,
                ground_truths=gts,
            )
        )
    return records


def external_scores(records: List[VideoRecord], num_classes: int) -> Dict[str, np.ndarray]:
    """Video-level scores that rank the classes present in each video first."""
    scores = {}
    for record in records:
        vector = np.full(num_classes, 0.05)
        for g in record.ground_truths:
            vector[g.label - 1] = 0.9
        scores[record.video_id] = vector
    return scores


def generate_synthetic(spec: SyntheticSpec, directory) -> Path:
    """Write a dataset for ``spec`` under ``directory``; returns the manifest path.

    Besides the manifest and per-video files this writes ``ground_truth.tsv``,
    ``external_scores.tsv`` and the spec itself as ``spec.yaml``.
    """
    directory = Path(directory)
    records = generate_videos(spec)
    manifest = write_dataset(records, directory)
    write_ground_truth(
        directory / "ground_truth.tsv", {r.video_id: r.ground_truths for r in records}
    )
    write_external_scores(
        directory / "external_scores.tsv", external_scores(records, spec.num_classes)
    )
    (directory / "spec.yaml").write_text(spec.to_yaml())
    log.info(
        f"wrote {len(records)} videos, {sum(len(r.proposals) for r in records)} proposals to {directory}"
    )
    return manifest
