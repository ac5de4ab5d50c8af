"""Parameter containers: dataclasses whose Tensor fields are learnable."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Params:
    """Mixin giving dataclasses ordered, dotted parameter names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for f in fields(self):
            yield from _walk(getattr(self, f.name), f"{prefix}{f.name}")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def astype(self, dtype) -> "Params":
        """Convert every parameter in place (e.g. float64 for gradient checks)."""
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(v, name: str) -> Iterator[tuple]:
    if isinstance(v, Tensor):
        if v.requires_grad:
            yield name, v
    elif isinstance(v, Params) and is_dataclass(v):
        yield from v.named_parameters(name + ".")
    elif isinstance(v, (list, tuple)):
        for i, item in enumerate(v):
            yield from _walk(item, f"{name}.{i}")


def param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape), dtype)


@dataclass
class Conv(Params):
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    pad: int = 0
    groups: int = 1

    @classmethod
    def init(cls, rng, cin: int, cout: int, k: int, groups: int = 1, bias: bool = True,
             dtype=np.float32) -> "Conv":
        fan_in = (cin // groups) * k * k
        w = uniform_fan_in(rng, (cout, cin // groups, k, k), fan_in, dtype)
        b = uniform_fan_in(rng, (cout,), fan_in, dtype) if bias else None
        return cls(w, b, 1, k // 2, groups)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


@dataclass
class Linear(Params):
    weight: Tensor
    bias: Optional[Tensor] = None

    @classmethod
    def init(cls, rng, din: int, dout: int, dtype=np.float32, zero_bias: bool = True) -> "Linear":
        w = uniform_fan_in(rng, (dout, din), din, dtype)
        b = param(np.zeros(dout), dtype) if zero_bias else uniform_fan_in(rng, (dout,), din, dtype)
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


@dataclass
class LayerNorm(Params):
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, c: int, dtype=np.float32) -> "LayerNorm":
        return cls(param(np.ones(c), dtype), param(np.zeros(c), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)
