"""Closed-form parameter and MAC accounting from a ModelConfig alone.

Convention: 1 MAC is reported as 1 FLOP.  Counted: convolutions (including
the per-sample MDConv), fully connected layers of the attention generator,
and one C_head^2 * H*W term per channel-attention map.  Elementwise ops,
normalization, softmax and kernel modulation are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

from .blocks import gated_width
from .dynconv import hidden_width
from .errors import ConfigError

FLOP_CONVENTION = ("1 MAC = 1 FLOP; conv + linear MACs, attention counted as "
                   "C_head^2*H*W per map (map formation only)")


@dataclass
class Tally:
    params: int = 0
    conv: int = 0
    linear: int = 0
    attention: int = 0
    by_stage: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return self.conv + self.linear + self.attention

    def add_conv(self, cin, cout, k, hw, groups=1, bias=True):
        w = cout * (cin // groups) * k * k
        self.params += w + (cout if bias else 0)
        self.conv += w * hw

    def add_linear(self, din, dout):
        self.params += din * dout + dout
        self.linear += din * dout


def _mdab(t: Tally, c: int, hw: int, e: float) -> None:
    h = gated_width(c, e)
    m = h // 2
    t.params += 2 * c
    t.add_conv(c, h, 1, hw)
    t.add_conv(h, h, 3, hw, groups=h)
    hid = hidden_width(m)
    t.add_linear(m, hid)
    for dout in (9, m, m):
        t.add_linear(hid, dout)
    t.add_conv(m, m, 3, hw, bias=False)
    t.add_conv(m, c, 1, hw)


def _etb(t: Tally, c: int, hw: int, e: float, heads: int) -> None:
    h = gated_width(c, e)
    t.params += 4 * c + 1 + c + h // 2
    t.add_conv(c, 3 * c, 1, hw)
    t.add_conv(3 * c, 3 * c, 3, hw, groups=3 * c)
    t.attention += heads * (c // heads) ** 2 * hw
    t.add_conv(c, c, 1, hw)
    t.add_conv(c, h, 1, hw)
    t.add_conv(h, h, 3, hw, groups=h)
    if h // 2 != c:
        t.add_conv(h // 2, c, 1, hw)
    t.add_conv(c, c, 1, hw)


def tally(cfg, h: int = 256, w: int = 256) -> Tally:
    """Walk the architecture symbolically at a (1, 3, h, w) input."""
    from .network import ModelConfig, Model
    if isinstance(cfg, Model):
        cfg = cfg.cfg
    if h % 8 or w % 8:
        raise ConfigError(f"resolution {h}x{w} must be divisible by 8")
    cfg.validate()
    t = Tally()
    dims, kinds, counts, widths = cfg.dims, cfg.stage_types, cfg.stage_counts(), cfg.stage_widths()
    hw = [(h >> i) * (w >> i) for i in range(4)]
    levels = [0, 1, 2, 3, 2, 1, 0]
    names = ["encoder-1", "encoder-2", "encoder-3", "latent", "decoder-3", "decoder-2", "decoder-1"]

    def blocks(slot):
        before = t.flops
        for _ in range(counts[slot]):
            if kinds[slot] == "C":
                _mdab(t, widths[slot], hw[levels[slot]], cfg.mdab_expansion)
            else:
                _etb(t, widths[slot], hw[levels[slot]], cfg.ffn_expansion, cfg.heads)
        t.by_stage[names[slot]] = t.flops - before

    t.add_conv(3, dims[0], 3, hw[0])
    for i in range(3):
        blocks(i)
        t.add_conv(dims[i], dims[i] // 2, 3, hw[i], bias=False)
    blocks(3)
    for slot, lvl in zip((4, 5, 6), (2, 1, 0)):
        t.add_conv(dims[lvl + 1], 2 * dims[lvl + 1], 3, hw[lvl + 1], bias=False)
        if lvl > 0:
            t.add_conv(2 * dims[lvl], dims[lvl], 1, hw[lvl], bias=False)
        blocks(slot)
    t.add_conv(2 * dims[0], dims[0], 3, hw[0])
    t.add_conv(dims[0], 3, 3, hw[0])
    return t


def count_flops(m, h: int = 256, w: int = 256) -> int:
    """Total MACs for one (1, 3, h, w) forward, see FLOP_CONVENTION."""
    return tally(m, h, w).flops


def count_params_symbolic(cfg) -> int:
    return tally(cfg, 8, 8).params
