"""Diagonal state-space encoder run along the adaptive scan order.

Per channel d and state s:
    A = -exp(A_log), delta = softplus(delta_param)
    A_bar = exp(delta * A)
    B_bar = (delta * A)^-1 (exp(delta * A) - 1) * delta * B
    h_j = A_bar * h_{j-1} + B_bar * v_j
    y_j = sum_s C * h_j + v_j
"""

import logging
from dataclasses import dataclass

import numpy as np

from hgfx.errors import NumericError, ShapeError
from hgfx.services.adaptive_scan import apply_order, invert_order
from hgfx.services.layers import Module, parameter
from hgfx.services.patch_embed import NodeSet
from hgfx.tensor import Tensor, exp, expm1_ratio, neg, reshape, softplus, stack, sum, unsqueeze

logger = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-6


@dataclass
class DiscreteSSM:
    A_bar: Tensor  # (D, S)
    B_bar: Tensor  # (D, S)


class SSMParams(Module):
    def __init__(self, dim: int, state_dim: int, rng: np.random.Generator, dtype=np.float64,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        # A = -(1..S) per channel; delta log-uniform in [dt_min, dt_max]
        self.A_log = parameter(np.tile(np.log(np.arange(1, state_dim + 1, dtype=np.float64)), (dim, 1)), dtype)
        self.B = parameter(rng.normal(0.0, 1.0, size=(dim, state_dim)), dtype)
        self.C = parameter(rng.normal(0.0, 1.0 / np.sqrt(state_dim), size=(dim, state_dim)), dtype)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=dim))
        self.delta_param = parameter(dt + np.log(-np.expm1(-dt)), dtype)  # softplus^-1(dt)
        self.state_dim = state_dim

    def A(self) -> Tensor:
        return neg(exp(self.A_log))

    def delta(self) -> Tensor:
        return softplus(self.delta_param)

    def discretize(self) -> DiscreteSSM:
        return zoh_discretize(self.A(), self.B, self.delta())

    def max_abs_A_bar(self) -> float:
        a = -np.exp(self.A_log.data.astype(np.float64))
        dt = np.logaddexp(0.0, self.delta_param.data.astype(np.float64))
        return float(np.max(np.abs(np.exp(dt[:, None] * a))))


def zoh_discretize(A: Tensor, B: Tensor, delta: Tensor, threshold: float = SERIES_THRESHOLD) -> DiscreteSSM:
    """Zero-order-hold discretization of a diagonal system, elementwise.

    ``delta`` of shape (D,) broadcasts over the state axis of (D, S) operators.
    Where |delta*A| < ``threshold`` the series limit B_bar = delta*B is used.
    """
    if np.any(delta.data <= 0):
        raise NumericError("zoh_discretize: delta must be positive")
    if delta.ndim == 1 and A.ndim == 2:
        delta = unsqueeze(delta, -1)
    dA = delta * A
    return DiscreteSSM(exp(dA), expm1_ratio(dA, threshold) * (delta * B))


def ssm_recurrence(d: DiscreteSSM, C: Tensor, seq):
    """Run the recurrence over a sequence [..., L, D] with h_0 = 0.

    Accepts a Tensor or a NodeSet and returns the same kind.
    """
    nodes = seq if isinstance(seq, NodeSet) else None
    x = seq.features if nodes is not None else seq
    width = x.shape[-1]
    if d.A_bar.shape[0] != width or d.B_bar.shape[0] != width or C.shape[0] != width:
        raise ShapeError(
            f"SSM operators {d.A_bar.shape}/{d.B_bar.shape}/{C.shape} don't match feature width {width}"
        )
    lead = x.shape[:-2]
    h = None
    ys = []
    for j in range(x.shape[-2]):
        v = x[(Ellipsis, j, slice(None))]
        u = d.B_bar * reshape(v, lead + (width, 1))
        h = u if h is None else d.A_bar * h + u
        ys.append(sum(C * h, axis=-1) + v)
    y = stack(ys, axis=-2)
    return NodeSet(y, nodes.grid_coords) if nodes is not None else y


def encode_semantic(nodes: NodeSet, plan, params: SSMParams) -> NodeSet:
    """Visual nodes -> semantic nodes, rows kept in spatial (raster) position.

    ``plan`` is a ScanPlan, a list of plans (one per batch sample) or raw orders.
    """
    ordered = apply_order(nodes, plan)
    encoded = ssm_recurrence(params.discretize(), params.C, ordered)
    return invert_order(encoded, plan)
