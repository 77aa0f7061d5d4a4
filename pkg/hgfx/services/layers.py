"""Parameter containers shared by the model components."""

from collections.abc import Iterator

import numpy as np

from hgfx.errors import ShapeError
from hgfx.tensor import Tensor, affine, leaky_relu, mean, power


def parameter(data: np.ndarray, dtype, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


class Module:
    """Walks its attributes to find parameters and sub-modules."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, list):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{full}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype)

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def parameter_megabytes(self) -> float:
        """Size of the parameters stored as 32-bit floats, in MB."""
        return self.parameter_count() * 4 / 1e6


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)), dtype)
        self.bias = parameter(np.zeros(out_dim), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {self.weight.shape[0]}")
        return affine(x, self.weight, self.bias)


class LayerNorm(Module):
    """Per-node standardization over the channel axis with learned scale/shift."""

    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.scale = parameter(np.ones(dim), dtype)
        self.shift = parameter(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        centered = x - mean(x, axis=-1, keepdims=True)
        var = mean(centered * centered, axis=-1, keepdims=True)
        return centered * power(var + self.eps, -0.5) * self.scale + self.shift


class MLP(Module):
    """Two affine layers with a LeakyReLU between them."""

    def __init__(
        self,
        in_dim: int,
        hidden: int,
        out_dim: int,
        rng: np.random.Generator,
        dtype=np.float64,
        slope: float = 0.2,
        out_bias: bool = True,
    ):
        self.fc1 = Linear(in_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, out_dim, rng, dtype, bias=out_bias)
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(leaky_relu(self.fc1(x), self.slope))
