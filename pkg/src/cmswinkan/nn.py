"""Parameter containers and the standard layers built on :mod:`cmswinkan.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal module tree: parameters are ``Tensor`` attributes with
    ``requires_grad``; children are ``Module`` attributes or lists of them."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    """He-normal init: N(0, 2 / fan_in), optionally rescaled by ``gain``."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return T.parameter(rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = he_normal(rng, (out_dim, in_dim), in_dim)
        self.bias = T.parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise T.DimensionError(f"Linear expects last dim {self.in_dim}, got {x.shape}")
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, self.in_dim)), T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            y = y + self.bias
        return T.reshape(y, lead + (self.out_dim,))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = T.parameter(np.ones(dim))
        self.bias = T.parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.weight = T.parameter(np.ones(channels))
        self.bias = T.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        self.stride, self.padding = stride, padding
        self.weight = he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k)
        self.bias = T.parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class CBR(Module):
    """3x3 convolution, batch norm, ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, k: int = 3):
        self.conv = Conv2d(in_ch, out_ch, k, rng, padding=k // 2, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
