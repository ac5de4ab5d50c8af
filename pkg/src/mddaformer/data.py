"""Synthetic degradations, patch sampling and flip augmentation.

Rain and haze are simple procedural stand-ins for benchmark datasets that are
not available offline: rain is a layer of oriented line segments with a
Gaussian cross-profile added to the image, haze follows the atmospheric
scattering model I = J*t + A*(1 - t) with t = exp(-beta * depth) over a
synthetic depth map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor

KINDS = ("gaussian_noise", "rain_streaks", "haze", "low_light")
DEPTH_MODES = ("linear-gradient", "radial")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so degradations replay exactly from a seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class DegradeSpec:
    kind: str = "gaussian_noise"
    sigma: float = 25.0           # gaussian_noise, 0-255 scale
    count: int = 20               # rain_streaks
    length: float = 12.0
    angle: float = 75.0           # degrees from the horizontal axis
    intensity: float = 0.5
    width: float = 0.8            # Gaussian cross-profile std, px
    beta: float = 1.0             # haze
    airlight: float = 0.9
    depth_mode: str = "linear-gradient"
    gamma: float = 2.0            # low_light
    gain: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; one of {KINDS}")
        if self.kind == "gaussian_noise" and self.sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.kind == "rain_streaks":
            if self.count < 0 or self.length < 0 or self.width <= 0:
                raise ConfigError("rain streaks need count >= 0, length >= 0, width > 0")
            if not 0.0 <= self.intensity <= 1.0:
                raise ConfigError(f"rain intensity must be in [0, 1], got {self.intensity}")
        if self.kind == "haze":
            if self.beta < 0:
                raise ConfigError(f"haze beta must be >= 0, got {self.beta}")
            if not 0.0 < self.airlight <= 1.0:
                raise ConfigError(f"airlight must be in (0, 1], got {self.airlight}")
            if self.depth_mode not in DEPTH_MODES:
                raise ConfigError(f"depth mode must be one of {DEPTH_MODES}")
        if self.kind == "low_light" and (self.gamma <= 0 or self.gain <= 0):
            raise ConfigError("low light needs gamma > 0 and gain > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeSpec":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown degradation keys: {sorted(extra)}")
        return cls(**d)


def _image_array(img) -> np.ndarray:
    a = np.asarray(getattr(img, "data", img))
    if a.ndim != 4 or a.shape[1] != 3:
        raise DimensionError(f"expected a (N, 3, H, W) image, got {a.shape}")
    return a


def depth_map(h: int, w: int, mode: str) -> np.ndarray:
    """Synthetic depth in [0, 1]; far is 1."""
    if mode == "linear-gradient":
        return np.repeat(np.linspace(1.0, 0.0, h)[:, None], w, axis=1)
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2)
    return 1.0 - r / max(r.max(), 1e-12)


def rain_layer(h: int, w: int, spec: DegradeSpec, rng: np.random.Generator) -> np.ndarray:
    """Max-composited streak mask in [0, 1]."""
    layer = np.zeros((h, w))
    if spec.count == 0 or spec.length == 0:
        return layer
    theta = math.radians(spec.angle)
    dy, dx = -math.sin(theta), math.cos(theta)
    half = spec.length / 2
    reach = int(math.ceil(half + 3 * spec.width)) + 1
    for _ in range(int(spec.count)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        jitter = rng.normal(0.0, 0.05)
        ddy, ddx = dy * math.cos(jitter) - dx * math.sin(jitter), dx * math.cos(jitter) + dy * math.sin(jitter)
        y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
        x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        py, px = yy + 0.5 - cy, xx + 0.5 - cx
        along = np.clip(py * ddy + px * ddx, -half, half)
        dist2 = (py - along * ddy) ** 2 + (px - along * ddx) ** 2
        streak = np.exp(-dist2 / (2 * spec.width ** 2))
        layer[y0:y1, x0:x1] = np.maximum(layer[y0:y1, x0:x1], streak)
    return layer


def degrade(clean, spec: DegradeSpec) -> Tensor:
    """Apply one synthetic degradation; output clamped to [0, 1], input untouched."""
    spec.validate()
    x = _image_array(clean).astype(np.float64)
    n, _, h, w = x.shape
    rng = make_rng(spec.seed)
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, spec.sigma / 255.0, size=x.shape) if spec.sigma > 0 else x.copy()
    elif spec.kind == "rain_streaks":
        out = np.empty_like(x)
        for i in range(n):
            out[i] = x[i] + spec.intensity * rain_layer(h, w, spec, rng)[None]
    elif spec.kind == "haze":
        t = np.exp(-spec.beta * depth_map(h, w, spec.depth_mode))[None, None]
        out = x * t + spec.airlight * (1.0 - t)
    else:
        out = spec.gain * np.power(x, spec.gamma)
    dtype = np.asarray(getattr(clean, "data", clean)).dtype
    return Tensor(np.clip(out, 0.0, 1.0).astype(dtype))


def synthetic_image(seed: int, h: int = 64, w: int = 64) -> Tensor:
    """Smooth sum-of-sinusoids RGB test pattern, normalized to [0, 1]."""
    r = make_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / h
    img = np.zeros((1, 3, h, w))
    for c in range(3):
        for _ in range(4):
            fx, fy = r.uniform(0.5, 4, 2)
            img[0, c] += np.sin(2 * np.pi * (fx * xx + fy * yy) + r.uniform(0, 2 * np.pi))
    img = (img - img.min()) / (img.max() - img.min())
    return Tensor(img.astype(np.float32))


def extract_patches(img, size: int, count: int, seed: int) -> list:
    """``count`` random (patch, (top, left)) crops of side ``size``."""
    a = _image_array(img)
    h, w = a.shape[2:]
    if size < 1 or size > min(h, w):
        raise DimensionError(f"patch size {size} does not fit image {h}x{w}")
    rng = make_rng(seed)
    out = []
    for _ in range(count):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        out.append((Tensor(a[:, :, top:top + size, left:left + size].copy()), (top, left)))
    return out


FLIPS = ("none", "h", "v", "hv")


def apply_flip(a: np.ndarray, flip: str) -> np.ndarray:
    if "h" in flip:
        a = a[..., ::-1]
    if "v" in flip:
        a = a[..., ::-1, :]
    return np.ascontiguousarray(a)


def flip_augment(pair: tuple, seed: int) -> tuple:
    """Apply the same random flip (none / h / v / hv, equally likely) to both images."""
    deg, clean = (np.asarray(getattr(t, "data", t)) for t in pair)
    if deg.shape != clean.shape:
        raise DimensionError(f"flip_augment: shape mismatch {deg.shape} vs {clean.shape}")
    flip = FLIPS[int(make_rng(seed).integers(0, 4))]
    return Tensor(apply_flip(deg, flip)), Tensor(apply_flip(clean, flip))


def make_pairs(clean_images: list, spec: DegradeSpec, patch: int, per_image: int, seed: int) -> list:
    """Degraded/clean patch pairs with provenance; one degradation seed per patch."""
    pairs = []
    for i, img in enumerate(clean_images):
        for j, (p, (top, left)) in enumerate(extract_patches(img, patch, per_image, seed + 7919 * i)):
            s = DegradeSpec(**{**spec.to_dict(), "seed": spec.seed + 1_000_003 * i + j})
            pairs.append({"degraded": degrade(p, s), "clean": p, "source": i,
                          "top": top, "left": left, "seed": s.seed})
    return pairs
