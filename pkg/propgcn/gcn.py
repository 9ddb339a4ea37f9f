"""Graph convolution layers with neighborhood sampling and hand-derived
backward passes.

A forward pass is split in two steps. ``plan_stack`` decides, top-down, which
nodes every layer needs and how each target aggregates its sources (sampled
with replacement during training, the full capped neighbor list otherwise).
``run_stack`` then computes bottom-up and caches what ``stack_backward``
needs. Reusing a plan makes a training forward pass repeatable, which the
finite-difference checks rely on.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from propgcn.errors import ConfigError, DimensionError, DivergenceError, PropGcnError
from propgcn.graph import ProposalGraph

log = logging.getLogger(__name__)

GCN = "gcn"
MLP = "mlp"
MEAN_POOL = "mean-pool"
MODES = (GCN, MLP, MEAN_POOL)


@dataclass
class GcnLayerParams:
    weight: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise DimensionError(f"layer weight must be a matrix, got shape {self.weight.shape}")
        if not np.all(np.isfinite(self.weight)):
            raise DivergenceError("layer weight has non-finite entries")


@dataclass
class GcnStack:
    layers: List[GcnLayerParams]
    dropout_rate: float = 0.8
    concat_input: bool = True
    mode: str = GCN
    self_add: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a stack needs at least one layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown stack mode {self.mode!r}, expected one of {MODES}")
        for k in range(1, len(self.layers)):
            d_out = self.layers[k - 1].weight.shape[1]
            d_in = self.layers[k].weight.shape[0]
            if d_out != d_in:
                raise DimensionError(
                    f"layer {k} expects {d_in} inputs but layer {k - 1} produces {d_out}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.hidden_dim + (self.input_dim if self.concat_input else 0)

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        hidden_dims: Sequence[int],
        rng: np.random.Generator,
        **options,
    ) -> "GcnStack":
        """Uniform init in +-sqrt(6 / (d_in + d_out))."""
        dims = [input_dim, *hidden_dims]
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / (d_in + d_out))
            layers.append(GcnLayerParams(rng.uniform(-bound, bound, size=(d_in, d_out))))
        return cls(layers=layers, **options)

    def named_parameters(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.layer{k}": layer.weight for k, layer in enumerate(self.layers)}


@dataclass
class Gradients:
    weights: List[np.ndarray]

    def named(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.layer{k}": g for k, g in enumerate(self.weights)}


def gcn_layer_forward(A: np.ndarray, X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Dense graph convolution A X W (activation is left to the caller)."""
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency must be square, got {A.shape}")
    if X.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency is {A.shape} but features have {X.shape[0]} rows")
    if W.shape[0] != X.shape[1]:
        raise DimensionError(f"features have {X.shape[1]} columns but weights expect {W.shape[0]}")
    return (A @ X) @ W


def propagation_matrix(graph: ProposalGraph, self_add: bool = True) -> np.ndarray:
    """Dense eval-path operator: mean of A_ij x_j over capped neighbors plus self."""
    n = graph.num_nodes
    P = np.eye(n) if self_add else np.zeros((n, n))
    for i in range(n):
        deg = graph.degree(i)
        if deg:
            P[i, graph.neighbor_index[i]] += graph.neighbor_weight[i] / deg
    return P


def sampled_aggregate(
    i: int,
    neighbor_sample: Sequence[int],
    a_row: np.ndarray,
    X: np.ndarray,
    W: np.ndarray,
    num_samples: int,
    self_add: bool = True,
) -> np.ndarray:
    """((1/N_s) sum_j A_ij x_j + x_i) W over the sampled neighbors of node i."""
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}")
    acc = np.zeros(X.shape[1], dtype=np.float64)
    for j in neighbor_sample:
        acc += a_row[j] * X[j]
    acc /= num_samples
    if self_add:
        acc += X[i]
    return acc @ W


def _sample_positions(degree: int, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    if degree == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.integers(0, degree, size=num_samples)


def sample_neighbors(
    graph: ProposalGraph, i: int, num_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform draw with replacement from node i's capped neighbor list."""
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}")
    return graph.neighbor_index[i][_sample_positions(graph.degree(i), num_samples, rng)]


@dataclass
class Hop:
    """Weighted gather from a source node set onto a target node set."""

    self_index: np.ndarray  # (T,)
    self_weight: np.ndarray  # (T,)
    neighbor_index: np.ndarray  # (T, m), padded with the self position
    neighbor_weight: np.ndarray  # (T, m), padded with zeros
    num_sources: int

    def apply(self, X: np.ndarray) -> np.ndarray:
        out = self.self_weight[:, None] * X[self.self_index]
        if self.neighbor_index.shape[1]:
            out = out + np.einsum("tm,tmd->td", self.neighbor_weight, X[self.neighbor_index])
        return out

    def adjoint(self, G: np.ndarray) -> np.ndarray:
        dX = np.zeros((self.num_sources, G.shape[1]), dtype=np.float64)
        np.add.at(dX, self.self_index, self.self_weight[:, None] * G)
        if self.neighbor_index.shape[1]:
            contrib = self.neighbor_weight[:, :, None] * G[:, None, :]
            np.add.at(dX, self.neighbor_index.ravel(), contrib.reshape(-1, G.shape[1]))
        return dX


def _make_hop(
    graph: ProposalGraph,
    targets: np.ndarray,
    kind: str,
    num_samples: int,
    rng: Optional[np.random.Generator],
    self_add: bool,
):
    """Build the hop onto ``targets``; returns (hop, source node ids).

    kind is "sample" (train path), "full" (eval path) or "pool" (uniform mean
    over self and neighbors).
    """
    position: Dict[int, int] = {int(t): p for p, t in enumerate(targets)}
    sources: List[int] = [int(t) for t in targets]
    rows_idx: List[List[int]] = []
    rows_w: List[List[float]] = []
    self_weight = np.full(len(targets), 1.0 if self_add else 0.0)

    for row, t in enumerate(targets):
        ids = graph.neighbor_index[t]
        weights = graph.neighbor_weight[t]
        deg = len(ids)
        if kind == "sample":
            picks = _sample_positions(deg, num_samples, rng)
            chosen, w = ids[picks], weights[picks] / num_samples
        elif kind == "full":
            chosen, w = ids, (weights / deg if deg else weights)
        else:
            chosen, w = ids, np.full(deg, 1.0 / (deg + 1))
            self_weight[row] = 1.0 / (deg + 1)
        idx = []
        for j in chosen:
            j = int(j)
            if j not in position:
                position[j] = len(sources)
                sources.append(j)
            idx.append(position[j])
        rows_idx.append(idx)
        rows_w.append(list(w))

    width = max((len(r) for r in rows_idx), default=0)
    neighbor_index = np.zeros((len(targets), width), dtype=np.int64)
    neighbor_weight = np.zeros((len(targets), width), dtype=np.float64)
    for row, (idx, w) in enumerate(zip(rows_idx, rows_w)):
        neighbor_index[row, :] = row
        neighbor_index[row, : len(idx)] = idx
        neighbor_weight[row, : len(w)] = w

    hop = Hop(
        self_index=np.arange(len(targets)),
        self_weight=self_weight,
        neighbor_index=neighbor_index,
        neighbor_weight=neighbor_weight,
        num_sources=len(sources),
    )
    return hop, np.array(sources, dtype=np.int64)


@dataclass
class StackPlan:
    targets: np.ndarray
    # node_sets[k] holds the node ids seen by layer k's input; node_sets[K] == targets
    # except in mean-pool mode, where the pool maps node_sets[K] onto targets
    node_sets: List[np.ndarray]
    hops: List[Optional[Hop]]
    pool: Optional[Hop] = None
    masks: List[Optional[np.ndarray]] = field(default_factory=list)


def plan_stack(
    graph: ProposalGraph,
    stack: GcnStack,
    targets: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    num_samples: int = 4,
    sample: bool = True,
) -> StackPlan:
    if targets is None:
        targets = np.arange(graph.num_nodes)
    targets = np.asarray(targets, dtype=np.int64)
    if len(np.unique(targets)) != len(targets):
        raise DimensionError("stack targets must be unique node ids")
    if training and rng is None:
        raise ConfigError("training mode needs a random generator")
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}")

    num_layers = len(stack.layers)
    hops: List[Optional[Hop]] = [None] * num_layers
    pool = None

    if stack.mode == GCN:
        kind = "sample" if (training and sample) else "full"
        node_sets = [None] * (num_layers + 1)
        node_sets[num_layers] = targets
        current = targets
        for k in reversed(range(num_layers)):
            hops[k], current = _make_hop(graph, current, kind, num_samples, rng, stack.self_add)
            node_sets[k] = current
    elif stack.mode == MLP:
        node_sets = [targets] * (num_layers + 1)
    else:
        pool, sources = _make_hop(graph, targets, "pool", num_samples, rng, True)
        node_sets = [sources] * (num_layers + 1)

    masks: List[Optional[np.ndarray]] = [None] * num_layers
    if training and stack.dropout_rate > 0.0:
        keep = 1.0 - stack.dropout_rate
        for k, layer in enumerate(stack.layers):
            shape = (len(node_sets[k]), layer.weight.shape[0])
            masks[k] = (rng.random(shape) >= stack.dropout_rate) / keep

    return StackPlan(targets=targets, node_sets=node_sets, hops=hops, pool=pool, masks=masks)


@dataclass
class StackCache:
    plan: StackPlan
    aggregated: List[np.ndarray]
    pre_activation: List[np.ndarray]
    layer_weights: List[np.ndarray]
    concat_input: bool


def run_stack(plan: StackPlan, X0: np.ndarray, stack: GcnStack):
    """Bottom-up computation for a plan; returns (output, cache)."""
    if X0.ndim != 2 or X0.shape[1] != stack.input_dim:
        raise DimensionError(
            f"stack expects {stack.input_dim}-dim inputs, got features of shape {X0.shape}"
        )

    H = X0[plan.node_sets[0]]
    aggregated, pre = [], []
    for k, layer in enumerate(stack.layers):
        H_in = H * plan.masks[k] if plan.masks[k] is not None else H
        agg = plan.hops[k].apply(H_in) if plan.hops[k] is not None else H_in
        Z = agg @ layer.weight
        H = np.maximum(Z, 0.0)
        aggregated.append(agg)
        pre.append(Z)

    if plan.pool is not None:
        H = plan.pool.apply(H)

    out = np.concatenate([H, X0[plan.targets]], axis=1) if stack.concat_input else H
    cache = StackCache(
        plan=plan,
        aggregated=aggregated,
        pre_activation=pre,
        layer_weights=[layer.weight for layer in stack.layers],
        concat_input=stack.concat_input,
    )
    return out, cache


def stack_forward(
    graph: ProposalGraph,
    X0: np.ndarray,
    stack: GcnStack,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    num_samples: int = 4,
    sample: bool = True,
    targets: Optional[np.ndarray] = None,
):
    """K layers of aggregation with ReLU, then [X^(K) || X^(0)] per target row.

    mode is "train" (sampling and dropout, needs rng) or "eval" (full
    neighbor lists, no dropout). Returns (output, cache).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if X0.shape[0] != graph.num_nodes:
        raise DimensionError(f"graph has {graph.num_nodes} nodes but features have {X0.shape[0]} rows")
    plan = plan_stack(graph, stack, targets, mode == "train", rng, num_samples, sample)
    return run_stack(plan, X0, stack)


def stack_backward(cache: Optional[StackCache], grad_output: np.ndarray) -> Gradients:
    """Exact weight gradients for the cached forward pass."""
    if cache is None:
        raise PropGcnError("stack_backward needs the cache of a forward pass")
    plan = cache.plan
    d_hidden = cache.layer_weights[-1].shape[1]
    if grad_output.shape[0] != len(plan.targets):
        raise DimensionError(
            f"output gradient has {grad_output.shape[0]} rows, expected {len(plan.targets)}"
        )

    # the concatenated X^(0) half carries no parameters
    G = grad_output[:, :d_hidden]
    if plan.pool is not None:
        G = plan.pool.adjoint(G)

    grads: List[np.ndarray] = [None] * len(cache.layer_weights)
    for k in reversed(range(len(cache.layer_weights))):
        G_pre = G * (cache.pre_activation[k] > 0.0)
        grads[k] = cache.aggregated[k].T @ G_pre
        if k == 0:
            break
        G_agg = G_pre @ cache.layer_weights[k].T
        G = plan.hops[k].adjoint(G_agg) if plan.hops[k] is not None else G_agg
        if plan.masks[k] is not None:
            G = G * plan.masks[k]
    return Gradients(weights=grads)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float):
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}, total


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    learning_rate: float,
    momentum: float = 0.0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, np.ndarray]:
    """W <- W - lr * grad (heavy-ball momentum when momentum > 0).

    ``velocity`` is updated in place when momentum is used.
    """
    updated = {}
    for name, value in params.items():
        if name not in grads:
            updated[name] = value
            continue
        grad = grads[name]
        if grad.shape != value.shape:
            raise DimensionError(f"{name}: gradient {grad.shape} vs parameter {value.shape}")
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(
                "non-finite gradient", {"parameter": name, "learning_rate": learning_rate}
            )
        if momentum > 0.0:
            if velocity is None:
                raise ConfigError("momentum needs a velocity buffer")
            v = momentum * velocity.get(name, np.zeros_like(value)) + grad
            velocity[name] = v
            step = v
        else:
            step = grad
        updated[name] = value - learning_rate * step
    return updated
