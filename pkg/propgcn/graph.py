"""Proposal graph construction: contextual and surrounding edges, neighbor
capping and cosine adjacency weights.

Edge (i, j) means proposal j is aggregated into proposal i. Candidates are
generated in both directions and capped per receiving node i.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from propgcn.errors import ConfigError, DimensionError
from propgcn.intervals import Proposal, as_bounds, surround_distance_matrix, tiou_matrix

log = logging.getLogger(__name__)

CONTEXTUAL = "contextual"
SURROUNDING = "surrounding"

# (src, dst, score) where score is tIoU for contextual and distance for surrounding
Candidate = Tuple[int, int, float]


@dataclass(frozen=True)
class GraphConfig:
    theta_ctx: float = 0.7
    theta_sur: float = 1.0
    max_neighbors: int = 10
    ctx_sur_ratio: Tuple[int, int] = (4, 1)
    use_contextual: bool = True
    use_surrounding: bool = True
    cap_in_eval: bool = True

    def __post_init__(self):
        # YAML hands us lists
        object.__setattr__(self, "ctx_sur_ratio", tuple(self.ctx_sur_ratio))
        if not 0.0 <= self.theta_ctx < 1.0:
            raise ConfigError(f"theta_ctx must lie in [0, 1), got {self.theta_ctx}")
        if not self.theta_sur > 0.0:
            raise ConfigError(f"theta_sur must be positive, got {self.theta_sur}")
        if int(self.max_neighbors) < 1:
            raise ConfigError(
                f"max_neighbors must be a positive integer, got {self.max_neighbors}"
            )
        if len(self.ctx_sur_ratio) != 2 or min(self.ctx_sur_ratio) < 1:
            raise ConfigError(
                f"ctx_sur_ratio must be two positive integers, got {self.ctx_sur_ratio}"
            )

    @property
    def quotas(self) -> Tuple[int, int]:
        """Per-node (contextual, surrounding) edge quotas."""
        ctx, sur = self.ctx_sur_ratio
        ctx_quota = self.max_neighbors * ctx // (ctx + sur)
        return ctx_quota, self.max_neighbors - ctx_quota


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: str
    weight: float


@dataclass
class ProposalGraph:
    nodes: List[Proposal]
    edges: List[Edge]
    # neighbor_index[i] lists the nodes aggregated into i, aligned with neighbor_weight[i]
    neighbor_index: List[np.ndarray] = field(default_factory=list)
    neighbor_weight: List[np.ndarray] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_index[i]

    def degree(self, i: int) -> int:
        return len(self.neighbor_index[i])

    def dense_adjacency(self) -> np.ndarray:
        """N x N matrix holding A_ij on kept edges and zero elsewhere (no self loops)."""
        n = self.num_nodes
        adj = np.zeros((n, n), dtype=np.float64)
        for i in range(n):
            adj[i, self.neighbor_index[i]] = self.neighbor_weight[i]
        return adj

    def edge_lines(self) -> List[str]:
        """One `src dst kind weight` line per edge, weights with 6 decimals."""
        return [f"{e.src} {e.dst} {e.kind} {e.weight:.6f}" for e in self.edges]


def _bounds(proposals: Sequence[Proposal]) -> Tuple[np.ndarray, np.ndarray]:
    return as_bounds([p.interval for p in proposals])


def find_contextual_edges(
    proposals: Sequence[Proposal], theta_ctx: float
) -> List[Candidate]:
    """Ordered pairs (i, j), i != j, with tIoU > theta_ctx, annotated with the tIoU."""
    starts, ends = _bounds(proposals)
    r = tiou_matrix(starts, ends, starts, ends)
    np.fill_diagonal(r, -1.0)
    src, dst = np.nonzero(r > theta_ctx)
    return [(int(i), int(j), float(r[i, j])) for i, j in zip(src, dst)]


def find_surrounding_edges(
    proposals: Sequence[Proposal], theta_sur: float
) -> List[Candidate]:
    """Ordered pairs with tIoU == 0 and distance < theta_sur, annotated with the distance."""
    starts, ends = _bounds(proposals)
    r = tiou_matrix(starts, ends, starts, ends)
    d = surround_distance_matrix(starts, ends)
    mask = (r == 0.0) & (d < theta_sur)
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return [(int(i), int(j), float(d[i, j])) for i, j in zip(src, dst)]


def cap_neighbors(
    num_nodes: int,
    contextual: Sequence[Candidate],
    surrounding: Sequence[Candidate],
    max_neighbors: int = 10,
    ctx_sur_ratio: Tuple[int, int] = (4, 1),
) -> List[List[Tuple[int, str]]]:
    """Keep the best contextual (largest tIoU) and surrounding (smallest
    distance) candidates per receiving node, under fixed quotas.

    Quota slack is not handed to the other edge type. Ties go to the lower id.
    """
    ctx_quota, sur_quota = GraphConfig(
        max_neighbors=max_neighbors, ctx_sur_ratio=ctx_sur_ratio
    ).quotas

    per_node_ctx: List[List[Tuple[float, int]]] = [[] for _ in range(num_nodes)]
    per_node_sur: List[List[Tuple[float, int]]] = [[] for _ in range(num_nodes)]
    for i, j, score in contextual:
        per_node_ctx[i].append((-score, j))
    for i, j, score in surrounding:
        per_node_sur[i].append((score, j))

    kept: List[List[Tuple[int, str]]] = []
    for i in range(num_nodes):
        ctx = sorted(per_node_ctx[i])[:ctx_quota]
        sur = sorted(per_node_sur[i])[:sur_quota]
        kept.append([(j, CONTEXTUAL) for _, j in ctx] + [(j, SURROUNDING) for _, j in sur])
    return kept


def adjacency_weight(x_i: np.ndarray, x_j: np.ndarray) -> float:
    """Cosine similarity clamped below at zero; a zero vector gives 0."""
    if x_i.shape != x_j.shape:
        raise DimensionError(f"feature shapes differ: {x_i.shape} vs {x_j.shape}")
    norm = np.linalg.norm(x_i) * np.linalg.norm(x_j)
    if norm == 0.0:
        return 0.0
    return max(0.0, float(np.dot(x_i, x_j) / norm))


def adjacency_weights(features: np.ndarray) -> np.ndarray:
    """Pairwise clamped cosine similarities for an N x d feature matrix."""
    norms = np.linalg.norm(features, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = features / safe[:, None]
    return np.clip(unit @ unit.T, 0.0, 1.0)


def build_graph(
    proposals: Sequence[Proposal], config: GraphConfig = GraphConfig(), capped: bool = True
) -> ProposalGraph:
    """Build the proposal graph; weights come from the original features x_i."""
    nodes = list(proposals)
    for position, p in enumerate(nodes):
        if p.id != position:
            raise DimensionError(
                f"proposal ids must equal their position, got id {p.id} at {position}"
            )
    n = len(nodes)
    if n == 0:
        return ProposalGraph(nodes=[], edges=[])

    dims = {p.feature.shape[0] for p in nodes}
    if len(dims) != 1:
        raise DimensionError(f"proposal feature dimensions differ within a video: {sorted(dims)}")

    contextual = find_contextual_edges(nodes, config.theta_ctx) if config.use_contextual else []
    surrounding = (
        find_surrounding_edges(nodes, config.theta_sur) if config.use_surrounding else []
    )

    if capped:
        kept = cap_neighbors(
            n, contextual, surrounding, config.max_neighbors, config.ctx_sur_ratio
        )
    else:
        kept = [[] for _ in range(n)]
        for i, j, _ in contextual:
            kept[i].append((j, CONTEXTUAL))
        for i, j, _ in surrounding:
            kept[i].append((j, SURROUNDING))

    weights = adjacency_weights(np.stack([p.feature for p in nodes]).astype(np.float64))

    edges: List[Edge] = []
    neighbor_index: List[np.ndarray] = []
    neighbor_weight: List[np.ndarray] = []
    for i in range(n):
        ids = np.array([j for j, _ in kept[i]], dtype=np.int64)
        w = weights[i, ids] if len(ids) else np.zeros(0, dtype=np.float64)
        neighbor_index.append(ids)
        neighbor_weight.append(w)
        for (j, kind), wij in zip(kept[i], w):
            edges.append(Edge(src=i, dst=int(j), kind=kind, weight=float(wij)))

    log.debug(
        f"graph: {n} nodes, {len(contextual)} contextual and {len(surrounding)} "
        f"surrounding candidates, {len(edges)} kept edges"
    )
    return ProposalGraph(
        nodes=nodes, edges=edges, neighbor_index=neighbor_index, neighbor_weight=neighbor_weight
    )
