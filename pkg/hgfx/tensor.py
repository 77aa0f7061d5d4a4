"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Operations record onto the active :class:`GradTape` when at least one input
requires grad. Outside a tape nothing is recorded, so a loss computed there
is detached and ``backward`` refuses it.
"""

import contextvars
import logging
from collections.abc import Iterable, Sequence

import numpy as np

from hgfx.errors import ConfigError, GradError, NumericError, ShapeError

logger = logging.getLogger(__name__)

_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "hgfx_active_tape", default=None
)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._ctx: "Function | None" = None
        self._tape: "GradTape | None" = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape} dtype={self.dtype}{label} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    # operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


class GradTape:
    """Ordered record of executed primitives for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` once. :meth:`reset` clears the record for reuse.
    """

    def __init__(self):
        self._records: list[tuple[Function, Tensor]] = []
        self._outputs: set[int] = set()
        self._consumed = False
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "GradTape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._tokens.pop())
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, fn: "Function", out: Tensor):
        self._records.append((fn, out))
        self._outputs.add(id(out))
        out._tape = self

    def reset(self):
        for _, out in self._records:
            out._tape = None
        self._records.clear()
        self._outputs.clear()
        self._consumed = False

    def backward(self, loss: Tensor):
        if self._consumed:
            raise GradError("backward already ran on this tape; reset it before reuse")
        if loss.size != 1:
            raise GradError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise GradError("loss is detached from the gradient tape")

        loss.grad = np.ones_like(loss.data)
        for fn, out in reversed(self._records):
            if out.grad is None:
                continue
            input_grads = fn.backward(out.grad)
            for t, g in zip(fn.inputs, input_grads):
                if g is None or not t.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=t.dtype), t.shape)
                t.grad = g if t.grad is None else t.grad + g
        self._consumed = True


def backward(loss: Tensor):
    """Populate ``grad`` on every requires-grad tensor that reaches ``loss``."""
    tape = loss._tape
    if tape is None:
        raise GradError("loss is detached from any gradient tape")
    tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite input")


class Function:
    """A differentiable primitive over numpy arrays.

    ``forward`` receives the input arrays and returns the output array;
    ``backward`` receives the output gradient and returns one gradient (or
    None) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = Tensor(fn.forward(*[t.data for t in inputs], **kwargs))
        tape = _active_tape.get()
        if tape is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
            tape.record(fn, out)
        return out

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return a**exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} don't broadcast") from None
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        return np.matmul(grad, np.swapaxes(self.b, -1, -2)), np.matmul(np.swapaxes(self.a, -1, -2), grad)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class LeakyReLU(Function):
    def forward(self, a, slope: float):
        _check_finite(a, "leaky_relu")
        self.scale = np.where(a >= 0, 1.0, slope).astype(a.dtype)
        return a * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a).astype(a.dtype)

    def backward(self, grad):
        sig = np.exp(-np.logaddexp(0.0, -self.a)).astype(self.a.dtype)
        return (grad * sig,)


class ExpM1Ratio(Function):
    """(exp(z) - 1) / z, taking the limit value 1 where |z| < threshold."""

    def forward(self, z, threshold: float):
        small = np.abs(z) < threshold
        safe = np.where(small, 1.0, z)
        self.z, self.small, self.safe = z, small, safe
        self.out = np.where(small, 1.0, np.expm1(safe) / safe).astype(z.dtype)
        return self.out

    def backward(self, grad):
        # d/dz = (exp(z) - phi(z)) / z, limit 1/2
        deriv = np.where(self.small, 0.5, (np.exp(self.safe) - self.out) / self.safe)
        return (grad * deriv.astype(self.z.dtype),)


class Sum(Function):
    def forward(self, a, axis, keepdims: bool):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Max(Function):
    """Max over one axis; the gradient goes to the first maximal entry."""

    def forward(self, a, axis: int, keepdims: bool):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        self.argmax = np.expand_dims(np.argmax(a, axis=axis), axis)
        return np.max(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(out, self.argmax, grad, axis=self.axis)
        return (out,)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class SwapLastAxes(Function):
    def forward(self, a):
        return np.swapaxes(a, -1, -2)

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2),)


class Concat(Function):
    def forward(self, *arrays, axis: int):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return np.split(grad, self.splits, axis=self.axis)


class Stack(Function):
    def forward(self, *arrays, axis: int):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return [np.take(grad, i, axis=self.axis) for i in range(len(self.inputs))]


class Index(Function):
    def forward(self, a, key):
        self.shape, self.key = a.shape, key
        return np.array(a[key])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        key = self.key if isinstance(self.key, tuple) else (self.key,)
        if any(isinstance(k, (np.ndarray, list)) for k in key):
            np.add.at(out, self.key, grad)
        else:
            out[self.key] = grad
        return (out,)


def _row_key(shape: tuple[int, ...], idx: np.ndarray):
    """Advanced-index key selecting rows ``idx`` along axis -2 of an array."""
    if len(shape) == 2:
        return (idx,)
    if len(shape) == 3:
        if idx.shape[0] != shape[0]:
            raise ShapeError(f"row index batch {idx.shape} doesn't match tensor {shape}")
        batch = np.arange(shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
        return (batch, idx)
    raise ShapeError(f"row gather supports rank 2 or 3 tensors, got {shape}")


class GatherRows(Function):
    def forward(self, a, idx: np.ndarray):
        self.shape = a.shape
        self.key = _row_key(a.shape, idx)
        return a[self.key]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.key, grad)
        return (out,)


class ScatterRows(Function):
    """out[..., idx[i], :] = a[..., i, :] for a permutation ``idx``."""

    def forward(self, a, idx: np.ndarray):
        self.key = _row_key(a.shape, idx)
        out = np.empty_like(a)
        out[self.key] = a
        return out

    def backward(self, grad):
        return (grad[self.key],)


class SoftmaxLastDim(Function):
    def forward(self, a):
        _check_finite(a, "softmax")
        shifted = np.exp(a - np.max(a, axis=-1, keepdims=True))
        self.out = shifted / np.sum(shifted, axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=-1, keepdims=True)),)


class LogSoftmaxLastDim(Function):
    def forward(self, a):
        _check_finite(a, "log_softmax")
        shifted = a - np.max(a, axis=-1, keepdims=True)
        self.out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * np.sum(grad, axis=-1, keepdims=True),)


# functional surface


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Div.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def power(a: Tensor, exponent: float) -> Tensor:
    return Pow.apply(a, exponent=exponent)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    return LeakyReLU.apply(a, slope=slope)


def softplus(a: Tensor) -> Tensor:
    return Softplus.apply(a)


def expm1_ratio(z: Tensor, threshold: float = 1e-6) -> Tensor:
    return ExpM1Ratio.apply(z, threshold=threshold)


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return Max.apply(a, axis=axis, keepdims=keepdims)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Reshape.apply(a, shape=shape)


def unsqueeze(a: Tensor, axis: int) -> Tensor:
    shape = list(a.shape)
    shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
    return reshape(a, tuple(shape))


def transpose(a: Tensor) -> Tensor:
    return SwapLastAxes.apply(a)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def index(a: Tensor, key) -> Tensor:
    return Index.apply(a, key=key)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Rows of ``a`` (axis -2) at ``idx``; a rank-3 ``a`` takes per-batch indices."""
    return GatherRows.apply(a, idx=np.asarray(idx, dtype=np.intp))


def scatter_rows(a: Tensor, idx) -> Tensor:
    return ScatterRows.apply(a, idx=np.asarray(idx, dtype=np.intp))


def take_lastdim(a: Tensor, idx) -> Tensor:
    """out[..., i, j] = a[..., i, idx[..., i, j]] for an ``a`` of rank 2 or 3."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[-2]).reshape(-1, 1)
    if a.ndim == 2:
        return index(a, (rows, idx))
    batch = np.arange(a.shape[0]).reshape(-1, 1, 1)
    return index(a, (batch, rows[None], idx))


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    return SoftmaxLastDim.apply(a)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    return LogSoftmaxLastDim.apply(a)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) in training, identity otherwise."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise NumericError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= p
    mask = Tensor(keep.astype(x.dtype) / (1.0 - p), dtype=x.dtype)
    return mul(x, mask)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [B, C] against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    logp = log_softmax_lastdim(logits)
    picked = index(logp, (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))
