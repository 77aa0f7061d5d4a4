"""Adaptive scanning: reciprocal-distance graph -> maximum spanning tree -> node order.

Orders are discrete. Gradients pass through ``apply_order``/``invert_order``
as row permutations, never through the choice of order itself.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from hgfx.errors import NumericError, StructureError
from hgfx.services.patch_embed import NodeSet
from hgfx.tensor import Tensor, gather_rows, scatter_rows

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class SimilarityGraph:
    weights: np.ndarray  # symmetric (N, N); diagonal unused

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ScanPlan:
    tree_edges: tuple[tuple[int, int], ...]
    order: np.ndarray

    def to_export(self) -> dict:
        return {
            "order": [int(i) for i in self.order],
            "tree_edges": [[int(i), int(j)] for i, j in self.tree_edges],
        }


def _as_matrix(nodes) -> np.ndarray:
    if isinstance(nodes, NodeSet):
        nodes = nodes.features
    if isinstance(nodes, Tensor):
        nodes = nodes.data
    return np.asarray(nodes, dtype=np.float64)


def pairwise_similarity(nodes, eps: float = DEFAULT_EPS) -> SimilarityGraph:
    """s_ij = 1 / max(d_ij, eps) over the features of one sample."""
    x = _as_matrix(nodes)
    if x.ndim != 2 or x.shape[0] < 1:
        raise StructureError(f"similarity needs an (N, D) node matrix with N >= 1, got {x.shape}")
    if eps <= 0:
        raise NumericError(f"distance floor must be positive, got {eps}")
    if not np.all(np.isfinite(x)):
        raise NumericError("pairwise_similarity: non-finite node features")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return SimilarityGraph(1.0 / np.maximum(dist, eps))


def _edge_key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def max_spanning_tree(g: SimilarityGraph) -> tuple[tuple[int, int], ...]:
    """Prim from vertex 0, maximizing weight.

    Among equal-weight candidates the edge with the smallest (min, max)
    index pair wins.
    """
    n = g.n
    if n == 0:
        raise StructureError("cannot build a spanning tree over zero nodes")
    w = g.weights
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = w[0].astype(np.float64).copy()
    parent = np.zeros(n, dtype=np.intp)
    edges: list[tuple[int, int]] = []

    for _ in range(n - 1):
        chosen = -1
        for v in range(n):
            if in_tree[v]:
                continue
            if chosen < 0 or best[v] > best[chosen] or (
                best[v] == best[chosen] and _edge_key(parent[v], v) < _edge_key(parent[chosen], chosen)
            ):
                chosen = v
        edges.append(_edge_key(int(parent[chosen]), chosen))
        in_tree[chosen] = True
        for v in range(n):
            if in_tree[v]:
                continue
            if w[chosen, v] > best[v] or (
                w[chosen, v] == best[v] and _edge_key(chosen, v) < _edge_key(parent[v], v)
            ):
                best[v] = w[chosen, v]
                parent[v] = chosen
    return tuple(edges)


def scan_order(tree_edges, g: SimilarityGraph) -> np.ndarray:
    """Depth-first preorder from node 0; heavier child edges first, ties by index."""
    n = g.n
    tree_edges = [tuple(int(v) for v in e) for e in tree_edges]
    if len(tree_edges) != n - 1:
        raise StructureError(f"a spanning tree over {n} nodes has {n - 1} edges, got {len(tree_edges)}")
    children: list[list[int]] = [[] for _ in range(n)]
    for i, j in tree_edges:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise StructureError(f"invalid tree edge ({i}, {j}) for {n} nodes")
        children[i].append(j)
        children[j].append(i)

    order: list[int] = []
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    while stack:
        node = stack.pop()
        if seen[node]:
            raise StructureError("edge set contains a cycle")
        seen[node] = True
        order.append(node)
        nxt = sorted((c for c in children[node] if not seen[c]), key=lambda c: (-g.weights[node, c], c))
        stack.extend(reversed(nxt))
    if len(order) != n:
        raise StructureError(f"edge set is disconnected: reached {len(order)} of {n} nodes")
    return np.asarray(order, dtype=np.intp)


def plan_scan(nodes, eps: float = DEFAULT_EPS) -> ScanPlan:
    g = pairwise_similarity(nodes, eps)
    edges = max_spanning_tree(g)
    return ScanPlan(edges, scan_order(edges, g))


def plan_batch(features: np.ndarray, eps: float = DEFAULT_EPS, threads: int = 1) -> list[ScanPlan]:
    """One plan per sample of a (B, N, D) feature array."""
    if threads > 1 and features.shape[0] > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda x: plan_scan(x, eps), features))
    return [plan_scan(x, eps) for x in features]


def raster_order(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.intp)


def raster_plan(n: int) -> ScanPlan:
    """Raster order as a plan over the path 0-1-...-(n-1), whose preorder from 0 is the raster."""
    if n < 1:
        raise StructureError(f"cannot plan a scan over {n} nodes")
    return ScanPlan(tuple((i, i + 1) for i in range(n - 1)), raster_order(n))


def local_window_order(grid_h: int, grid_w: int, window: int) -> np.ndarray:
    """Window by window in raster order, raster order inside each window."""
    order = []
    for wr in range(0, grid_h, window):
        for wc in range(0, grid_w, window):
            for r in range(wr, min(wr + window, grid_h)):
                for c in range(wc, min(wc + window, grid_w)):
                    order.append(r * grid_w + c)
    return np.asarray(order, dtype=np.intp)


def consecutive_similarity(g: SimilarityGraph, order) -> float:
    order = np.asarray(order)
    if order.size < 2:
        return 0.0
    return float(np.mean(g.weights[order[:-1], order[1:]]))


def paint_scan_order(order, grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """Gray image (H, W) in [0, 1]: each patch shaded by its position in the scan."""
    order = np.asarray(order, dtype=np.intp)
    n = grid_h * grid_w
    _check_permutation(order, n)
    rank = np.empty(n)
    rank[order] = np.arange(n) / max(n - 1, 1)
    return np.kron(rank.reshape(grid_h, grid_w), np.ones((patch_size, patch_size)))


def _check_permutation(order: np.ndarray, n: int):
    rows = order.reshape(-1, order.shape[-1])
    expected = np.arange(n)
    if order.shape[-1] != n or any(not np.array_equal(np.sort(r), expected) for r in rows):
        raise StructureError(f"order is not a permutation of 0..{n - 1}")


def _stack_orders(order) -> np.ndarray:
    if isinstance(order, ScanPlan):
        return order.order
    if isinstance(order, (list, tuple)) and order and isinstance(order[0], ScanPlan):
        return np.stack([p.order for p in order])
    return np.asarray(order, dtype=np.intp)


def apply_order(nodes: NodeSet, order) -> NodeSet:
    """Rows gathered into scan order; a batch takes one order per sample."""
    order = _stack_orders(order)
    _check_permutation(order, nodes.n_nodes)
    coords = nodes.grid_coords
    coords = coords[order] if coords.ndim == 2 else np.take_along_axis(coords, order[..., None], axis=-2)
    return NodeSet(gather_rows(nodes.features, order), coords)


def invert_order(nodes: NodeSet, order) -> NodeSet:
    """Undo :func:`apply_order`: row i goes back to position order[i]."""
    order = _stack_orders(order)
    _check_permutation(order, nodes.n_nodes)
    inverse = np.argsort(order, axis=-1)
    coords = nodes.grid_coords
    coords = coords[inverse] if coords.ndim == 2 else np.take_along_axis(coords, inverse[..., None], axis=-2)
    return NodeSet(scatter_rows(nodes.features, order), coords)
