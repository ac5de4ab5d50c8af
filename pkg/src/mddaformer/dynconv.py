"""Multi-dimensional dynamic convolution (MDConv).

A static bank ``W[Cout, Cin, k, k]`` is modulated per input sample by three
sigmoid attentions produced from the input itself:

    alpha_s (k x k)   spatial positions of the kernel
    alpha_c (Cin)     input channels
    alpha_f (Cout)    output filters

    W_d[n] = W * alpha_s[n] * alpha_c[n] * alpha_f[n]
    y[n]   = conv(x[n], W_d[n])

The attention generator is GAP -> FC + ReLU -> three FC + sigmoid heads.
There is no bias term and no kernel-mixture attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import Linear, Params, uniform_fan_in
from .tensor import Tensor


def hidden_width(cin: int) -> int:
    """Reduction ratio 1/4 with a floor of 4 so tiny configs stay usable."""
    return max(cin // 4, 4)


@dataclass
class DynKernel(Params):
    weight: Tensor
    fc1: Linear
    head_s: Linear
    head_c: Linear
    head_f: Linear
    stride: int = 1
    pad: int = 1

    @classmethod
    def init(cls, rng, cin: int, cout: int, k: int = 3, dtype=np.float32) -> "DynKernel":
        w = uniform_fan_in(rng, (cout, cin, k, k), cin * k * k, dtype)
        hid = hidden_width(cin)
        return cls(
            weight=w,
            fc1=Linear.init(rng, cin, hid, dtype),
            head_s=Linear.init(rng, hid, k * k, dtype),
            head_c=Linear.init(rng, hid, cin, dtype),
            head_f=Linear.init(rng, hid, cout, dtype),
            stride=1,
            pad=k // 2,
        )

    @property
    def cin(self) -> int:
        return self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        return mdconv_forward(x, self)


def attention_triple(x: Tensor, dk: DynKernel) -> tuple:
    """Per-sample (alpha_s[N,k,k], alpha_c[N,Cin], alpha_f[N,Cout])."""
    if x.ndim != 4 or x.shape[1] != dk.cin:
        raise DimensionError(f"MDConv expects {dk.cin} input channels, got shape {x.shape}")
    z = T.relu(dk.fc1(T.global_avg_pool(x)))
    n, k = x.shape[0], dk.k
    a_s = T.reshape(T.sigmoid(dk.head_s(z)), (n, k, k))
    a_c = T.sigmoid(dk.head_c(z))
    a_f = T.sigmoid(dk.head_f(z))
    return a_s, a_c, a_f


def dynamic_kernel(dk: DynKernel, a_s: Tensor, a_c: Tensor, a_f: Tensor) -> Tensor:
    """Materialize W_d of shape (N, Cout, Cin, k, k)."""
    n, k = a_s.shape[0], dk.k
    w = T.reshape(dk.weight, (1, dk.cout, dk.cin, k, k))
    w = T.mul(w, T.reshape(a_s, (n, 1, 1, k, k)))
    w = T.mul(w, T.reshape(a_c, (n, 1, dk.cin, 1, 1)))
    return T.mul(w, T.reshape(a_f, (n, dk.cout, 1, 1, 1)))


def mdconv_forward(x: Tensor, dk: DynKernel) -> Tensor:
    a_s, a_c, a_f = attention_triple(x, dk)
    return T.conv2d_per_sample(x, dynamic_kernel(dk, a_s, a_c, a_f), dk.stride, dk.pad)
