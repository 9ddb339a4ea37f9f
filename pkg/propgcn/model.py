"""Two-branch proposal model: one stack for classification on x_i, one for
boundaries on the extended feature, with the prediction heads on top."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from propgcn.errors import CheckpointError, ConfigError
from propgcn.gcn import GCN, MODES, GcnLayerParams, GcnStack, StackCache, plan_stack, run_stack, stack_backward
from propgcn.graph import ProposalGraph
from propgcn.heads import HeadOutputGrads, HeadOutputs, HeadParams, heads_backward, heads_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StackConfig:
    num_layers: int = 2
    # None keeps each branch at its input width
    hidden_dims: Optional[Tuple[int, ...]] = None
    dropout: float = 0.8
    mode1: str = GCN
    mode2: str = GCN
    self_add: bool = True
    concat_input: bool = True

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dims is not None:
            object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
            if len(self.hidden_dims) != self.num_layers:
                raise ConfigError(
                    f"hidden_dims lists {len(self.hidden_dims)} widths for {self.num_layers} layers"
                )
        for mode in (self.mode1, self.mode2):
            if mode not in MODES:
                raise ConfigError(f"unknown stack mode {mode!r}, expected one of {MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def widths(self, input_dim: int) -> List[int]:
        if self.hidden_dims is not None:
            return list(self.hidden_dims)
        return [input_dim] * self.num_layers


@dataclass
class ModelCache:
    targets: np.ndarray
    cache1: StackCache
    cache2: StackCache
    h1: np.ndarray
    h2: np.ndarray


@dataclass
class ProposalModel:
    stack1: GcnStack
    stack2: GcnStack
    heads: HeadParams
    meta: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def initialize(
        cls,
        feature_dim: int,
        num_classes: int,
        config: StackConfig,
        rng: np.random.Generator,
    ) -> "ProposalModel":
        common = dict(
            dropout_rate=config.dropout,
            concat_input=config.concat_input,
            self_add=config.self_add,
        )
        stack1 = GcnStack.initialize(
            feature_dim, config.widths(feature_dim), rng, mode=config.mode1, **common
        )
        stack2 = GcnStack.initialize(
            3 * feature_dim, config.widths(3 * feature_dim), rng, mode=config.mode2, **common
        )
        heads = HeadParams.initialize(stack1.output_dim, stack2.output_dim, num_classes, rng)
        return cls(stack1=stack1, stack2=stack2, heads=heads)

    @property
    def num_classes(self) -> int:
        return self.heads.num_classes

    @property
    def feature_dim(self) -> int:
        return self.stack1.input_dim

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        params.update(self.stack1.named_parameters("stack1"))
        params.update(self.stack2.named_parameters("stack2"))
        params.update(self.heads.named_parameters("heads"))
        return params

    def load_parameters(self, params: Dict[str, np.ndarray]):
        """Replace every parameter in place; names and shapes must match."""
        current = self.parameters()
        missing = set(current) - set(params)
        extra = set(params) - set(current)
        if missing or extra:
            raise CheckpointError(
                "<parameters>",
                f"parameter names differ (missing {sorted(missing)}, unexpected {sorted(extra)})",
            )
        for name, value in params.items():
            if value.shape != current[name].shape:
                raise CheckpointError(
                    "<parameters>", f"{name} has shape {value.shape}, expected {current[name].shape}"
                )
        for prefix, stack in (("stack1", self.stack1), ("stack2", self.stack2)):
            stack.layers = [
                GcnLayerParams(np.array(params[f"{prefix}.layer{k}"], dtype=np.float64))
                for k in range(len(stack.layers))
            ]
        for name in self.heads.named_parameters("heads"):
            attr = name.split(".", 1)[1]
            setattr(self.heads, attr, np.array(params[name], dtype=np.float64))

    def forward(
        self,
        graph: ProposalGraph,
        x: np.ndarray,
        x_ext: np.ndarray,
        targets: Optional[np.ndarray] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        num_samples: int = 4,
        sample: bool = True,
        plans=None,
    ) -> Tuple[HeadOutputs, ModelCache]:
        """Head outputs for ``targets`` (every node when None).

        Each branch plans its own neighbor draw and dropout. Pass ``plans``
        from an earlier cache to repeat a training pass exactly.
        """
        if plans is None:
            plan1 = plan_stack(graph, self.stack1, targets, training, rng, num_samples, sample)
            plan2 = plan_stack(graph, self.stack2, targets, training, rng, num_samples, sample)
        else:
            plan1, plan2 = plans
        h1, cache1 = run_stack(plan1, x, self.stack1)
        h2, cache2 = run_stack(plan2, x_ext, self.stack2)
        outputs = heads_forward(h1, h2, self.heads)
        return outputs, ModelCache(plan1.targets, cache1, cache2, h1, h2)

    def backward(self, cache: ModelCache, grads: HeadOutputGrads) -> Dict[str, np.ndarray]:
        param_grads, d_h1, d_h2 = heads_backward(cache.h1, cache.h2, self.heads, grads)
        param_grads.update(stack_backward(cache.cache1, d_h1).named("stack1"))
        param_grads.update(stack_backward(cache.cache2, d_h2).named("stack2"))
        return param_grads

    @staticmethod
    def plans_of(cache: ModelCache):
        return cache.cache1.plan, cache.cache2.plan
