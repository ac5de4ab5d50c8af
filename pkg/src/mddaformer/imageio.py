"""8-bit RGB image I/O: PNG through Pillow, binary PPM (P6) by hand."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .errors import ImageIOError
from .tensor import Tensor

IMAGE_SUFFIXES = (".png", ".ppm")


def _to_tensor(rgb: np.ndarray) -> Tensor:
    return Tensor((rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy())


def _to_uint8(t) -> np.ndarray:
    a = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise ImageIOError(f"expected a (1, 3, H, W) image tensor, got {a.shape}")
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _PPM_HEADER.match(raw)
    if not m:
        raise ImageIOError(f"{path}: malformed PPM header (only binary P6 is supported)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageIOError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    body = raw[m.end():]
    need = w * h * 3
    if len(body) < need:
        raise ImageIOError(f"{path}: truncated PPM data ({len(body)} of {need} bytes)")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def load_image(path) -> Tensor:
    """Read an 8-bit RGB PNG or P6 PPM into a (1, 3, H, W) tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"{path}: no such file")
    if path.suffix.lower() == ".ppm":
        return _to_tensor(read_ppm(path))
    from PIL import Image
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ImageIOError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            rgb = np.asarray(im, dtype=np.uint8)
    except ImageIOError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types for broken files
        raise ImageIOError(f"{path}: cannot decode image ({exc})") from exc
    return _to_tensor(rgb)


def save_image(t, path) -> None:
    """Write a [0, 1] image tensor as PNG or PPM (by suffix), quantized to 8 bits."""
    path = Path(path)
    rgb = _to_uint8(t)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if path.suffix.lower() == ".ppm":
            write_ppm(tmp, rgb)
        else:
            from PIL import Image
            Image.fromarray(rgb, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc


def list_images(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise ImageIOError(f"{d}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
