"""U-shaped restoration network: MDAB encoder/decoder around an ETB latent stage."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .blocks import (EtbParams, MdabParams, SHORTCUT_SOURCES, downsample, init_downsample,
                     init_upsample, upsample)
from .errors import ConfigError, DimensionError
from .layers import Conv, Params, _walk
from .tensor import Tensor

BLOCK_KINDS = ("C", "T")


def expand_layout(layout: str) -> str:
    """'CTC' (encoder, latent, decoder) -> 7-slot 'CCCTCCC'; 7-slot passes through."""
    layout = layout.replace("-", "").upper()
    if len(layout) == 3:
        layout = layout[0] * 3 + layout[1] + layout[2] * 3
    if len(layout) != 7 or any(ch not in BLOCK_KINDS for ch in layout):
        raise ConfigError(f"stage layout must be 3 or 7 slots over C/T, got {layout!r}")
    return layout


@dataclass
class ModelConfig:
    base_dim: int = 60
    mdab_counts: tuple = (3, 6, 6, 6, 6, 3)
    etb_count: int = 10
    stage_types: str = "CCCTCCC"
    mdab_expansion: float = 0.875
    ffn_expansion: float = 2.0
    heads: int = 1
    ffn_shortcut_source: str = "block_input"

    def __post_init__(self):
        self.mdab_counts = tuple(int(c) for c in self.mdab_counts)
        self.stage_types = expand_layout(self.stage_types)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**{**dict(base_dim=60, mdab_counts=(3, 6, 6, 6, 6, 3), etb_count=10), **kw})

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        return cls(**{**dict(base_dim=48, mdab_counts=(2, 6, 8, 4, 3, 2), etb_count=10), **kw})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        return cls(**{**dict(base_dim=8, mdab_counts=(1, 1, 1, 1, 1, 1), etb_count=2), **kw})

    @classmethod
    def preset(cls, name: str, **kw) -> "ModelConfig":
        try:
            return {"full": cls.full, "small": cls.small, "tiny": cls.tiny}[name](**kw)
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose full, small or tiny") from None

    @property
    def dims(self) -> list:
        c = self.base_dim
        return [c, 2 * c, 4 * c, 8 * c, 4 * c, 2 * c, c]

    def stage_counts(self) -> list:
        """Block count per slot of the 7-slot layout."""
        m = self.mdab_counts
        return [m[0], m[1], m[2], self.etb_count, m[3], m[4], m[5]]

    def stage_widths(self) -> list:
        """Channel width the blocks of each slot operate at (level-1 decoder is 2*C0)."""
        c = self.base_dim
        return [c, 2 * c, 4 * c, 8 * c, 4 * c, 2 * c, 2 * c]

    def validate(self) -> None:
        if self.base_dim < 2 or self.base_dim % 2:
            raise ConfigError(f"base_dim must be a positive even integer, got {self.base_dim}")
        if len(self.mdab_counts) != 6 or any(c < 0 for c in self.mdab_counts):
            raise ConfigError(f"mdab_counts must be 6 non-negative integers, got {self.mdab_counts}")
        if self.etb_count < 0:
            raise ConfigError("etb_count must be non-negative")
        if self.ffn_shortcut_source not in SHORTCUT_SOURCES:
            raise ConfigError(f"ffn_shortcut_source must be one of {SHORTCUT_SOURCES}")
        if self.mdab_expansion <= 0 or self.ffn_expansion <= 0:
            raise ConfigError("expansion factors must be positive")
        names = ["encoder-1", "encoder-2", "encoder-3", "latent", "decoder-3", "decoder-2", "decoder-1"]
        for name, kind, width in zip(names, self.stage_types, self.stage_widths()):
            if kind == "T" and width % self.heads:
                raise ConfigError(f"stage {name}: width {width} not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mdab_counts"] = list(self.mdab_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


def _make_block(kind: str, rng, width: int, cfg: ModelConfig, dtype):
    if kind == "C":
        return MdabParams.init(rng, width, cfg.mdab_expansion, dtype)
    return EtbParams.init(rng, width, cfg.ffn_expansion, cfg.heads, cfg.ffn_shortcut_source, dtype)


@dataclass
class EncoderStage(Params):
    blocks: list
    down: Conv


@dataclass
class DecoderStage(Params):
    up: Conv
    reduce: Optional[Conv]
    blocks: list


@dataclass
class Model(Params):
    cfg: ModelConfig
    embed: Conv
    encoders: list
    latent: list
    decoders: list
    tail1: Conv
    tail2: Conv

    def named_parameters(self, prefix: str = ""):
        # cfg is not a parameter container
        for name in ("embed", "encoders", "latent", "decoders", "tail1", "tail2"):
            yield from _walk(getattr(self, name), prefix + name)

    def __call__(self, img: Tensor) -> Tensor:
        return restore(self, img)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32, validate: bool = True) -> Model:
    """Initialize a model deterministically from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dims, kinds, counts, widths = cfg.dims, cfg.stage_types, cfg.stage_counts(), cfg.stage_widths()
    c0 = cfg.base_dim
    embed = Conv.init(rng, 3, c0, 3, dtype=dtype)
    encoders = []
    for i in range(3):
        blocks = [_make_block(kinds[i], rng, widths[i], cfg, dtype) for _ in range(counts[i])]
        encoders.append(EncoderStage(blocks, init_downsample(rng, dims[i], dtype)))
    latent = [_make_block(kinds[3], rng, widths[3], cfg, dtype) for _ in range(counts[3])]
    decoders = []
    for slot, level in zip((4, 5, 6), (2, 1, 0)):
        up = init_upsample(rng, dims[level + 1], dtype)
        reduce = None
        if level > 0:
            reduce = Conv.init(rng, 2 * dims[level], dims[level], 1, bias=False, dtype=dtype)
        blocks = [_make_block(kinds[slot], rng, widths[slot], cfg, dtype) for _ in range(counts[slot])]
        decoders.append(DecoderStage(up, reduce, blocks))
    tail1 = Conv.init(rng, 2 * c0, c0, 3, dtype=dtype)
    tail2 = Conv.init(rng, c0, 3, 3, dtype=dtype)
    model = Model(cfg, embed, encoders, latent, decoders, tail1, tail2)
    if validate:
        with T.no_grad():
            probe = Tensor(np.zeros((1, 3, 64, 64), dtype=dtype))
            out = restore(model, probe)
        if out.shape != probe.shape:
            raise ConfigError(f"dry run produced {out.shape}, expected {probe.shape}")
    return model


def _run(blocks: list, x: Tensor) -> Tensor:
    for b in blocks:
        x = b(x)
    return x


def forward_features(m: Model, x: Tensor) -> Tensor:
    """Embedding through level-1 decoder; input spatial dims divisible by 8."""
    feats = T.relu(m.embed(x))
    skips = []
    for stage in m.encoders:
        feats = _run(stage.blocks, feats)
        skips.append(feats)
        feats = downsample(feats, stage.down)
    feats = _run(m.latent, feats)
    for stage, skip in zip(m.decoders, reversed(skips)):
        feats = T.concat_channels([upsample(feats, stage.up), skip])
        if stage.reduce is not None:
            feats = stage.reduce(feats)
        feats = _run(stage.blocks, feats)
    return feats


def restore(m: Model, img: Tensor) -> Tensor:
    """Restored image = degraded image + two-conv tail over decoder features."""
    if img.ndim != 4 or img.shape[1] != 3:
        raise DimensionError(f"restore expects (N, 3, H, W), got {img.shape}")
    h, w = img.shape[2:]
    ph, pw = (-h) % 8, (-w) % 8
    x = T.pad_reflect(img, ph, pw)
    out = T.add(x, m.tail2(m.tail1(forward_features(m, x))))
    return T.crop(out, h, w)


def count_params(m: Union[Model, Params]) -> int:
    return int(sum(p.data.size for p in m.parameters()))
