"""Heterogeneous graph construction: visual centers -> top-k semantic neighbours.

Neighbour selection is discrete; gradients reach H and the node features
only through the aggregation that consumes the graph.
"""

from dataclasses import dataclass

import numpy as np

from hgfx.errors import ConfigError, ShapeError, StructureError
from hgfx.services.patch_embed import NodeSet
from hgfx.tensor import Tensor


@dataclass(frozen=True)
class Adjacency:
    k: int
    dilation: int
    idx: np.ndarray  # (..., N, k) semantic indices per visual center

    @property
    def edge_count(self) -> int:
        return int(np.prod(self.idx.shape[:-1])) * self.k

    def to_export(self) -> dict:
        if self.idx.ndim != 2:
            raise StructureError("export one sample's adjacency at a time")
        return {"k": self.k, "dilation": self.dilation, "adj": self.idx.tolist()}

    @classmethod
    def from_export(cls, doc: dict) -> "Adjacency":
        idx = np.asarray(doc["adj"], dtype=np.intp)
        adj = cls(int(doc["k"]), int(doc["dilation"]), idx)
        if idx.ndim != 2 or idx.shape[1] != adj.k:
            raise StructureError(f"adjacency rows must have exactly k={adj.k} entries")
        n = idx.shape[0]
        for row in idx:
            if row.min() < 0 or row.max() >= n or len(set(row.tolist())) != adj.k:
                raise StructureError("adjacency row has out-of-range or duplicate indices")
        return adj


@dataclass
class HeteroGraph:
    V_v: Tensor
    V_s: Tensor
    adj: Adjacency
    H: Tensor | None = None

    def to_export(self) -> dict:
        return self.adj.to_export()


def _array(x) -> np.ndarray:
    if isinstance(x, NodeSet):
        x = x.features
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def euclidean_distances(V_v, V_s) -> np.ndarray:
    """(..., N, D) x (..., M, D) -> (..., N, M)."""
    a, b = _array(V_v), _array(V_s)
    if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"cannot compare nodes of shapes {a.shape} and {b.shape}")
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _check_selection(k: int, dilation: int, n: int):
    if k < 1 or dilation < 1:
        raise ConfigError(f"k and dilation must be positive, got k={k}, dilation={dilation}")
    if k * dilation > n:
        raise ConfigError(f"k*dilation = {k * dilation} exceeds the {n} candidate nodes")


def _strided(ranked: np.ndarray, k: int, dilation: int) -> np.ndarray:
    return np.ascontiguousarray(ranked[..., : k * dilation : dilation])


def knn_adjacency(V_v, V_s, k: int, dilation: int = 1) -> Adjacency:
    """Rank semantic nodes by ascending distance (ties by index), keep every dilation-th."""
    dist = euclidean_distances(V_v, V_s)
    _check_selection(k, dilation, dist.shape[-1])
    ranked = np.argsort(dist, axis=-1, kind="stable")
    return Adjacency(k, dilation, _strided(ranked, k, dilation))


def adaptive_adjacency(H, V_v, V_s, k: int, dilation: int = 1) -> Adjacency:
    """Rank by descending H_ij * (-eudist_ij) (ties by index), keep every dilation-th."""
    dist = euclidean_distances(V_v, V_s)
    h = _array(H)
    if h.shape != dist.shape:
        raise ShapeError(f"correlation {h.shape} doesn't match distance matrix {dist.shape}")
    _check_selection(k, dilation, dist.shape[-1])
    score = h * -dist
    ranked = np.argsort(-score, axis=-1, kind="stable")
    return Adjacency(k, dilation, _strided(ranked, k, dilation))


def build_hetero_graph(V_v, V_s, H: Tensor | None, k: int, dilation: int = 1) -> HeteroGraph:
    """Bundle nodes and correlation with their adjacency.

    With ``H`` the adaptive adjacency is used, without it plain KNN.
    """
    v = V_v.features if isinstance(V_v, NodeSet) else V_v
    s = V_s.features if isinstance(V_s, NodeSet) else V_s
    adj = knn_adjacency(v, s, k, dilation) if H is None else adaptive_adjacency(H, v, s, k, dilation)
    return HeteroGraph(v, s, adj, H)
