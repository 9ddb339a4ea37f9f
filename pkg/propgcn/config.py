"""Flat YAML settings routed onto the typed config dataclasses.

Precedence, lowest first: dataclass defaults, the dataset and stream
profiles, the config file, explicit overrides (CLI flags).
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

from propgcn.errors import ConfigError
from propgcn.evaluation import EVAL_PROFILES, EvalConfig
from propgcn.graph import GraphConfig
from propgcn.heads import THRESHOLD_PROFILES, LossConfig
from propgcn.model import StackConfig
from propgcn.trainer import DATASET_BATCH_SIZES, STREAM_LEARNING_RATES, TrainConfig

log = logging.getLogger(__name__)


SECTIONS = {
    "graph": GraphConfig,
    "stack": StackConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
PROFILE_KEYS = ("dataset", "stream")


def _owners() -> Dict[str, str]:
    owners = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            owners[f.name] = section
    return owners


def profile_values(dataset: str, stream: str) -> Dict[str, Any]:
    if dataset not in THRESHOLD_PROFILES:
        raise ConfigError(f"unknown dataset profile {dataset!r}, expected one of {sorted(THRESHOLD_PROFILES)}")
    if stream not in STREAM_LEARNING_RATES:
        raise ConfigError(f"unknown stream profile {stream!r}, expected one of {sorted(STREAM_LEARNING_RATES)}")
    t1, t2, t3, t4 = THRESHOLD_PROFILES[dataset]
    values = {
        "fg_iou_min": t1,
        "incomplete_overlap_min": t2,
        "incomplete_iou_max": t3,
        "bg_iou_max": t4,
        "batch_size": DATASET_BATCH_SIZES[dataset],
        "lr_initial": STREAM_LEARNING_RATES[stream],
    }
    values.update(EVAL_PROFILES[dataset])
    return values


def _expand(layer: Mapping[str, Any]) -> Dict[str, Any]:
    """Drop unset values and spread ``mode`` onto both branches."""
    out = {k: v for k, v in layer.items() if v is not None}
    mode = out.pop("mode", None)
    if mode is not None:
        out.setdefault("mode1", mode)
        out.setdefault("mode2", mode)
    return out


@dataclass
class Settings:
    dataset: str = "thumos"
    stream: str = "rgb"
    graph: GraphConfig = field(default_factory=GraphConfig)
    stack: StackConfig = field(default_factory=StackConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def flat(self) -> Dict[str, Any]:
        values: Dict[str, Any] = {"dataset": self.dataset, "stream": self.stream}
        for section in SECTIONS:
            for key, value in asdict(getattr(self, section)).items():
                values[key] = list(value) if isinstance(value, tuple) else value
        return values


def explicit_settings(*layers: Mapping[str, Any]) -> Dict[str, Any]:
    """Only the keys the layers set, later wins. Profile-derived values are
    left out, so replaying this layer lets a new profile take effect."""
    merged: Dict[str, Any] = {}
    for layer in layers:
        merged.update(_expand(layer))
    return merged


def build_settings(*layers: Mapping[str, Any]) -> Settings:
    """Merge flat layers (later wins) on top of the selected profiles."""
    expanded = [_expand(layer) for layer in layers]
    top = {"dataset": "thumos", "stream": "rgb"}
    for layer in expanded:
        top.update({k: layer[k] for k in PROFILE_KEYS if k in layer})

    merged = profile_values(top["dataset"], top["stream"])
    for layer in expanded:
        merged.update({k: v for k, v in layer.items() if k not in PROFILE_KEYS})

    owners = _owners()
    unknown = sorted(k for k in merged if k not in owners)
    if unknown:
        raise ConfigError(f"unknown settings {unknown}")

    kwargs: Dict[str, Dict[str, Any]] = {section: {} for section in SECTIONS}
    for key, value in merged.items():
        kwargs[owners[key]][key] = value
    try:
        built = {section: SECTIONS[section](**kwargs[section]) for section in SECTIONS}
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return Settings(dataset=top["dataset"], stream=top["stream"], **built)


def read_config_file(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path) as f:
            values = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror or e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    nested = sorted(k for k, v in values.items() if isinstance(v, dict))
    if nested:
        raise ConfigError(f"{path}: settings must be flat, found sections {nested}")
    return values


def load_settings(path=None, overrides: Optional[Mapping[str, Any]] = None) -> Settings:
    file_values = read_config_file(path) if path is not None else {}
    settings = build_settings(file_values, overrides or {})
    log.debug(f"settings: dataset={settings.dataset} stream={settings.stream}")
    return settings
