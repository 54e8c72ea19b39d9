"""Parameter containers and the small set of layers the pipeline needs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from voxfuse.core.tensor import Tensor, as_tensor, concat, matmul, pad, reshape, transpose
from voxfuse.errors import ShapeError


class Module:
    """Base class that discovers parameters from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set[int]):
        for key, value in vars(self).items():
            yield from _walk_value(f"{prefix}{key}", value, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: shape {value.shape} vs {p.shape}")
            p.data = value.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - interface
        raise NotImplementedError


def _walk_value(name: str, value, seen: set[int]):
    if isinstance(value, Tensor):
        if value.requires_grad and id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        yield from value._walk(name + ".", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(f"{name}.{i}", item, seen)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_value(f"{name}.{key}", item, seen)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x W^T + b`` over the last axis of a 1-D or 2-D input."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Tensor(_uniform(rng, (out_dim, in_dim), bound), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (out_dim,), bound), requires_grad=True) if bias else None

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear expects last dim {self.in_dim}, got {x.shape}")
        if x.ndim == 1:
            y = matmul(self.weight, x)
        else:
            y = matmul(x, self.weight.T)
        return y + self.bias if self.bias is not None else y


class Pointwise3d(Module):
    """1x1x1 convolution on a channel-first ``C x X x Y x Z`` volume."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        self.linear = Linear(in_ch, out_ch, rng=rng, bias=bias)

    @property
    def in_ch(self) -> int:
        return self.linear.in_dim

    @property
    def out_ch(self) -> int:
        return self.linear.out_dim

    def forward(self, volume: Tensor) -> Tensor:
        if volume.ndim != 4 or volume.shape[0] != self.in_ch:
            raise ShapeError(f"Pointwise3d expects {self.in_ch} x X x Y x Z, got {volume.shape}")
        c, *spatial = volume.shape
        flat = reshape(volume, (c, -1))
        y = matmul(self.linear.weight, flat)
        if self.linear.bias is not None:
            y = y + reshape(self.linear.bias, (-1, 1))
        return reshape(y, (self.out_ch, *spatial))


class Conv3d(Module):
    """3x3x3 convolution, stride 1, zero padding 1, channel-first volumes."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(27 * in_ch)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Tensor(_uniform(rng, (out_ch, in_ch, 3, 3, 3), bound), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (out_ch,), bound), requires_grad=True)

    def set_identity(self) -> None:
        """Center tap only, mapping channel ``i`` to channel ``i``."""
        if self.in_ch != self.out_ch:
            raise ShapeError("identity kernel needs in_ch == out_ch")
        w = np.zeros_like(self.weight.data)
        for i in range(self.in_ch):
            w[i, i, 1, 1, 1] = 1.0
        self.weight.data = w
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, volume: Tensor) -> Tensor:
        if volume.ndim != 4 or volume.shape[0] != self.in_ch:
            raise ShapeError(f"Conv3d expects {self.in_ch} x X x Y x Z, got {volume.shape}")
        c, nx, ny, nz = volume.shape
        padded = pad(volume, ((0, 0), (1, 1), (1, 1), (1, 1)))
        taps = [
            padded[:, i:i + nx, j:j + ny, k:k + nz]
            for i in range(3) for j in range(3) for k in range(3)
        ]
        cols = reshape(concat(taps, axis=0), (27 * c, -1))
        # weight (out, in, 3,3,3) -> (out, 27*in) with tap-major ordering to match ``cols``
        w = reshape(transpose(self.weight, (0, 2, 3, 4, 1)), (self.out_ch, 27 * c))
        y = matmul(w, cols) + reshape(self.bias, (-1, 1))
        return reshape(y, (self.out_ch, nx, ny, nz))
