"""Cross-modal correlation between visual and semantic nodes.

Flexible mapping (shared W_G), dynamic context encoding, scaled correlation
``alpha`` normalized over semantic nodes, and heterogeneous correlation ``H``.
"""

from dataclasses import dataclass

import numpy as np

from hgfx.errors import ShapeError
from hgfx.services.layers import MLP, Linear, Module, parameter
from hgfx.services.patch_embed import NodeSet
from hgfx.tensor import Tensor, leaky_relu, matmul, softmax_lastdim, transpose


class MappingParams(Module):
    def __init__(self, dim: int, mapped_dim: int, rng: np.random.Generator, dtype=np.float64, slope: float = 0.2):
        self.conv_v = Linear(dim, mapped_dim, rng, dtype, bias=False)
        self.conv_s = Linear(dim, mapped_dim, rng, dtype, bias=False)
        self.W_G = parameter(np.eye(mapped_dim) + rng.normal(0.0, 0.02, size=(mapped_dim, mapped_dim)), dtype)
        self.mlp_v = MLP(dim, mapped_dim, mapped_dim, rng, dtype, slope)
        # a key-side output bias shifts every score in a row equally; the row softmax removes it
        self.mlp_s = MLP(dim, mapped_dim, mapped_dim, rng, dtype, slope, out_bias=False)
        self.mapped_dim = mapped_dim


@dataclass
class CorrelationResult:
    alpha: Tensor
    H: Tensor
    d_a: int


def _features(nodes) -> Tensor:
    return nodes.features if isinstance(nodes, NodeSet) else nodes


def _check_pair(V_v: Tensor, V_s: Tensor):
    if V_v.shape != V_s.shape:
        raise ShapeError(f"visual nodes {V_v.shape} and semantic nodes {V_s.shape} must share N and D")


def flexible_map(V_v, V_s, p: MappingParams) -> tuple[Tensor, Tensor]:
    V_v, V_s = _features(V_v), _features(V_s)
    _check_pair(V_v, V_s)
    return matmul(p.conv_v(V_v), p.W_G), matmul(p.conv_s(V_s), p.W_G)


def context_encode(V_v, V_s, p: MappingParams) -> tuple[Tensor, Tensor]:
    V_v, V_s = _features(V_v), _features(V_s)
    _check_pair(V_v, V_s)
    return p.mlp_v(V_v), p.mlp_s(V_s)


def correlation(Q: Tensor, K: Tensor, C_v: Tensor, C_s: Tensor, d_a: int) -> Tensor:
    scores = matmul(Q + C_v, transpose(K + C_s)) * (1.0 / np.sqrt(d_a))
    return softmax_lastdim(scores)


def hetero_correlation(alpha: Tensor, slope: float = 0.2) -> Tensor:
    return softmax_lastdim(leaky_relu(alpha, slope))


def cross_modal_correlation(V_v, V_s, p: MappingParams, slope: float = 0.2) -> CorrelationResult:
    Q, K = flexible_map(V_v, V_s, p)
    C_v, C_s = context_encode(V_v, V_s, p)
    alpha = correlation(Q, K, C_v, C_s, p.mapped_dim)
    return CorrelationResult(alpha, hetero_correlation(alpha, slope), p.mapped_dim)
