"""MDAB and ETB blocks plus the pixel-(un)shuffle scale transitions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .dynconv import DynKernel
from .errors import ConfigError, DimensionError
from .layers import Conv, LayerNorm, Params, param
from .tensor import Tensor

SHORTCUT_SOURCES = ("block_input", "tsa_output")


def gated_width(c: int, expansion: float) -> int:
    """Hidden width of a chunk-gated path, rounded to an even count."""
    h = 2 * int(math.floor(expansion * c / 2 + 0.5))
    if h < 2:
        raise ConfigError(f"expansion {expansion} leaves no gated channels for C={c}")
    return h


def _check_channels(x: Tensor, c: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"{what} expects (N, {c}, H, W), got {x.shape}")


# ---------------------------------------------------------------------------
# MDAB

@dataclass
class MdabParams(Params):
    ln: LayerNorm
    expand: Conv
    dw: Conv
    mdconv: DynKernel
    project: Conv

    @classmethod
    def init(cls, rng, c: int, expansion: float = 0.875, dtype=np.float32) -> "MdabParams":
        h = gated_width(c, expansion)
        return cls(
            ln=LayerNorm.init(c, dtype),
            expand=Conv.init(rng, c, h, 1, dtype=dtype),
            dw=Conv.init(rng, h, h, 3, groups=h, dtype=dtype),
            mdconv=DynKernel.init(rng, h // 2, h // 2, 3, dtype),
            project=Conv.init(rng, h // 2, c, 1, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.ln.gamma.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return mdab_forward(x, self)


def mdab_forward(x: Tensor, p: MdabParams) -> Tensor:
    _check_channels(x, p.channels, "MDAB")
    c1, c2 = T.chunk2(p.dw(p.expand(p.ln(x))))
    return T.add(x, p.project(p.mdconv(T.mul(c1, c2))))


# ---------------------------------------------------------------------------
# ETB

@dataclass
class EtbParams(Params):
    ln1: LayerNorm
    qkv_point: Conv
    qkv_dw: Conv
    attn_out: Conv
    temperature: Tensor
    k1: Tensor
    ln2: LayerNorm
    ffn_point: Conv
    ffn_dw: Conv
    k2: Tensor
    shortcut_point: Conv
    ffn_proj: Optional[Conv] = None
    heads: int = 1
    shortcut_source: str = "block_input"

    @classmethod
    def init(cls, rng, c: int, expansion: float = 2.0, heads: int = 1,
             shortcut_source: str = "block_input", dtype=np.float32) -> "EtbParams":
        if heads < 1 or c % heads:
            raise ConfigError(f"ETB: C={c} not divisible by heads={heads}")
        if shortcut_source not in SHORTCUT_SOURCES:
            raise ConfigError(f"ETB: unknown shortcut source {shortcut_source!r}")
        h = gated_width(c, expansion)
        return cls(
            ln1=LayerNorm.init(c, dtype),
            qkv_point=Conv.init(rng, c, 3 * c, 1, dtype=dtype),
            qkv_dw=Conv.init(rng, 3 * c, 3 * c, 3, groups=3 * c, dtype=dtype),
            attn_out=Conv.init(rng, c, c, 1, dtype=dtype),
            temperature=param(np.ones(1), dtype),
            k1=param(np.ones(c), dtype),
            ln2=LayerNorm.init(c, dtype),
            ffn_point=Conv.init(rng, c, h, 1, dtype=dtype),
            ffn_dw=Conv.init(rng, h, h, 3, groups=h, dtype=dtype),
            k2=param(np.ones(h // 2), dtype),
            shortcut_point=Conv.init(rng, c, c, 1, dtype=dtype),
            ffn_proj=None if h // 2 == c else Conv.init(rng, h // 2, c, 1, dtype=dtype),
            heads=heads,
            shortcut_source=shortcut_source,
        )

    @property
    def channels(self) -> int:
        return self.k1.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return etb_forward(x, self)


def _channel_scale(x: Tensor, k: Tensor) -> Tensor:
    return T.mul(x, T.reshape(k, (1, k.shape[0], 1, 1)))


def attention_map(x: Tensor, p: EtbParams) -> tuple:
    """Return (A, V_hat) with A of shape (N, heads, C/heads, C/heads)."""
    _check_channels(x, p.channels, "ETB")
    n, c, hh, ww = x.shape
    qkv = p.qkv_dw(p.qkv_point(p.ln1(x)))
    ch = c // p.heads
    q, k, v = (T.reshape(T.slice_channels(qkv, i * c, (i + 1) * c), (n, p.heads, ch, hh * ww))
               for i in range(3))
    logits = T.div(T.matmul(q, T.transpose_last2(k)), p.temperature)
    return T.softmax(logits), v


def transposed_self_attention(x: Tensor, p: EtbParams) -> Tensor:
    """Channel (C x C) attention followed by a 1x1 projection and k1 shortcut."""
    a, v = attention_map(x, p)
    f = T.reshape(T.matmul(a, v), x.shape)
    return T.add(p.attn_out(f), _channel_scale(x, p.k1))


def etb_forward(x: Tensor, p: EtbParams) -> Tensor:
    t = transposed_self_attention(x, p)
    c1, c2 = T.chunk2(p.ffn_dw(p.ffn_point(p.ln2(t))))
    g = _channel_scale(T.mul(c1, c2), p.k2)
    if p.ffn_proj is not None:
        g = p.ffn_proj(g)
    s = x if p.shortcut_source == "block_input" else t
    return T.add(T.add(g, p.shortcut_point(s)), s)


# ---------------------------------------------------------------------------
# Scale transitions

def init_downsample(rng, c: int, dtype=np.float32) -> Conv:
    if c % 2:
        raise ConfigError(f"downsample needs an even channel count, got {c}")
    return Conv.init(rng, c, c // 2, 3, bias=False, dtype=dtype)


def init_upsample(rng, c: int, dtype=np.float32) -> Conv:
    if c % 2:
        raise ConfigError(f"upsample needs an even channel count, got {c}")
    return Conv.init(rng, c, 2 * c, 3, bias=False, dtype=dtype)


def downsample(x: Tensor, conv: Conv) -> Tensor:
    """3x3 conv C -> C/2, then pixel unshuffle: (N, 2C, H/2, W/2)."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"downsample needs even H, W, got {x.shape[2:]}")
    return T.pixel_unshuffle(conv(x), 2)


def upsample(x: Tensor, conv: Conv) -> Tensor:
    """3x3 conv C -> 2C, then pixel shuffle: (N, C/2, 2H, 2W)."""
    return T.pixel_shuffle(conv(x), 2)
