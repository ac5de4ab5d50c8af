"""Binary checkpoint format.

Layout::

    bytes 0-7    magic b"MDDAFRM1"
    bytes 8-15   header length L, unsigned 64-bit little endian
    next L bytes UTF-8 JSON header: format version, model config, optional
                 optimizer scalars, and an ordered manifest of (name, shape)
    remainder    raw little-endian float32 arrays in manifest order

Optimizer moment buffers appear in the manifest as ``opt.m.<param>`` and
``opt.v.<param>``.  Writes go to a temporary file that is then renamed.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, ConfigError
from .network import Model, ModelConfig, build_model

MAGIC = b"MDDAFRM1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_checkpoint(model: Model, opt, path, extra: Optional[dict] = None) -> None:
    named = list(model.named_parameters())
    arrays = [(n, p.data) for n, p in named]
    opt_header = None
    if opt is not None:
        opt_header = opt.scalars()
        for n, _ in named:
            if n in opt.m:
                arrays.append((f"opt.m.{n}", opt.m[n]))
                arrays.append((f"opt.v.{n}", opt.v[n]))
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "optimizer": opt_header,
        "extra": extra or {},
        "manifest": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_LE_F32).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple:
    """Return (header dict, {name: float32 array}) after structural validation."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        if raw[:7] == MAGIC[:7]:
            raise CheckpointError(f"{path}: unsupported checkpoint version {raw[7:8]!r}")
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    arrays, off = {}, 16 + hlen
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data at entry '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=_LE_F32, count=nbytes // 4, offset=off).reshape(shape)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after manifest data")
    return header, arrays


def load_checkpoint(path) -> tuple:
    """Rebuild (Model, OptState or None) and verify every entry against the config."""
    from .train import OptState
    header, arrays = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
        model = build_model(cfg, seed=0, validate=False)
    except (ConfigError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from exc
    named = dict(model.named_parameters())
    for name, p in named.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter '{name}'")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{path}: entry '{name}' has shape {arrays[name].shape}, "
                                  f"config expects {p.shape}")
        p.data = arrays[name].astype(np.float32)
    unknown = [n for n in arrays if n not in named and not n.startswith("opt.")]
    if unknown:
        raise CheckpointError(f"{path}: unexpected entry '{unknown[0]}'")
    opt = None
    if header.get("optimizer") is not None:
        opt = OptState.from_scalars(header["optimizer"])
        for name, p in named.items():
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk in arrays:
                if arrays[mk].shape != p.shape or vk not in arrays or arrays[vk].shape != p.shape:
                    raise CheckpointError(f"{path}: optimizer entry for '{name}' is inconsistent")
                opt.m[name] = arrays[mk].astype(np.float32)
                opt.v[name] = arrays[vk].astype(np.float32)
    return model, opt
