"""PSNR / SSIM evaluation on [0, 1] images, in RGB or BT.601 luma."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_SIGMA = 11, 1.5


def _as_chw(img) -> np.ndarray:
    """Accept Tensor / ndarray in (1,C,H,W), (C,H,W) or (H,W); return float64 (C,H,W)."""
    a = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise DimensionError(f"expected a single image, got batch of {a.shape[0]}")
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DimensionError(f"expected an image array, got shape {a.shape}")
    return a


def rgb_to_y(img) -> np.ndarray:
    """Studio-swing BT.601 luma of a [0, 1] RGB image, returned as (1, H, W)."""
    a = _as_chw(img)
    if a.shape[0] != 3:
        raise DimensionError(f"rgb_to_y needs 3 channels, got {a.shape[0]}")
    y = (65.481 * a[0] + 128.553 * a[1] + 24.966 * a[2] + 16.0) / 255.0
    return y[None]


def psnr(a, b) -> float:
    """10*log10(1/MSE) in dB; identical inputs report PSNR_CAP."""
    x, y = _as_chw(a), _as_chw(b)
    if x.shape != y.shape:
        raise DimensionError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of a 2-D array."""
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    g = _gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian, sigma 1.5, valid region), averaged over channels."""
    x, y = _as_chw(a), _as_chw(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape[1:]) < SSIM_WIN:
        raise DimensionError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape[1:]}")
    return float(np.mean([_ssim_channel(x[c], y[c]) for c in range(x.shape[0])]))


@dataclass
class EvalReport:
    channel_mode: str = "rgb"
    rows: list = field(default_factory=list)

    def add(self, path: str, restored, clean) -> tuple:
        if self.channel_mode == "y":
            restored, clean = rgb_to_y(restored), rgb_to_y(clean)
        row = (str(path), psnr(restored, clean), ssim(restored, clean))
        self.rows.append(row)
        return row

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "psnr_db", "ssim"])
            for p, ps, ss in self.rows:
                w.writerow([p, f"{ps:.6f}", f"{ss:.6f}"])


def evaluate_pairs(pairs: Sequence[tuple], y_channel: bool = False) -> EvalReport:
    """pairs: (name, restored, clean) triples."""
    report = EvalReport("y" if y_channel else "rgb")
    for name, restored, clean in pairs:
        report.add(name, restored, clean)
    return report
