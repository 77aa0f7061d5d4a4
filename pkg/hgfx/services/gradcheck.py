"""Central finite differences against the gradient tape."""

import logging
from collections.abc import Callable, Sequence

import numpy as np

from hgfx.tensor import GradTape, Tensor, sum

logger = logging.getLogger(__name__)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / (||a|| + ||n||).

    When both norms are below ``floor`` the gradients agree: a structurally
    zero gradient against finite-difference roundoff is not a mismatch.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    norm_a, norm_n = np.linalg.norm(a), np.linalg.norm(n)
    if norm_a < floor and norm_n < floor:
        return 0.0
    denom = norm_a + norm_n
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(f: Callable[[], float], param: Tensor, indices: Sequence[int], h: float = 1e-6) -> np.ndarray:
    """d f / d param at the given flat indices, (f(x+h) - f(x-h)) / 2h."""
    out = np.zeros(len(indices))
    for i, idx in enumerate(indices):
        pos = np.unravel_index(int(idx), param.shape)
        orig = param.data[pos]
        param.data[pos] = orig + h
        plus = f()
        param.data[pos] = orig - h
        minus = f()
        param.data[pos] = orig
        out[i] = (plus - minus) / (2.0 * h)
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-6,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Relative error per parameter group.

    ``loss_fn`` must rebuild the loss from the current parameter values and
    be deterministic. With ``samples`` set, at most that many entries per
    group are perturbed.
    """
    for _, p in params:
        p.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    rng = rng if rng is not None else np.random.default_rng(0)

    def value() -> float:
        return loss_fn().item()

    errors = {}
    for name, p in params:
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).astype(np.float64)
        if samples is None or p.size <= samples:
            indices = np.arange(p.size)
        else:
            indices = np.sort(rng.choice(p.size, size=samples, replace=False))
        numeric = numerical_gradient(value, p, indices, h)
        errors[name] = relative_error(analytic[indices], numeric)
        logger.debug("gradcheck %s: %.3g over %d entries", name, errors[name], len(indices))
    return errors


def check_function(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-6,
    seed: int = 0,
) -> float:
    """Worst relative error of ``fn``'s input gradients under a random linear readout."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = fn(*tensors).data
    readout = Tensor(rng.normal(size=probe.shape))

    def loss_fn() -> Tensor:
        return sum(fn(*tensors) * readout)

    errors = check_gradients(loss_fn, [(f"input{i}", t) for i, t in enumerate(tensors)], h)
    return max(errors.values())
