"""PSNR loss, AdamW, cosine schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import flip_augment
from .errors import DimensionError, NonFiniteError, TrainingAborted
from .metrics import psnr
from .network import Model, restore
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_EPS = 1e-8


def psnr_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Negative PSNR on [0, 1] images: 10*log10(MSE + 1e-8)."""
    if pred.shape != target.shape:
        raise DimensionError(f"psnr_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data
    mse = float(np.mean(diff * diff))
    value = 10.0 * math.log10(mse + LOSS_EPS)
    coef = 10.0 / (math.log(10.0) * (mse + LOSS_EPS)) * 2.0 / diff.size

    def backward(g):
        gp = (g * coef * diff).astype(pred.dtype)
        return gp, -gp

    return T.custom_op("psnr_loss", np.asarray(value, dtype=pred.dtype), (pred, target), backward)


@dataclass
class Schedule:
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    total_steps: int = 1000


def cosine_lr(step: int, sch: Schedule) -> float:
    if sch.total_steps <= 0:
        return sch.lr_min
    if step < 0 or step > sch.total_steps:
        warnings.warn(f"step {step} outside [0, {sch.total_steps}]; using lr_min", stacklevel=2)
        return sch.lr_min
    return sch.lr_min + 0.5 * (sch.lr_init - sch.lr_min) * (1.0 + math.cos(math.pi * step / sch.total_steps))


@dataclass
class OptState:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.02
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "weight_decay": self.weight_decay,
                "eps": self.eps, "step": self.step}

    @classmethod
    def from_scalars(cls, d: dict) -> "OptState":
        return cls(**d)


def adamw_step(params: Sequence[tuple], grads: Sequence[np.ndarray], s: OptState, lr: float) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction.

    ``params`` is a sequence of (name, Tensor); ``grads`` aligns with it.
    Non-finite gradients reject the whole step before anything is modified.
    """
    if len(params) != len(grads):
        raise DimensionError("adamw_step: params and grads differ in length")
    for (name, p), g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"adamw_step: grad for '{name}' has shape {g.shape}, param {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError("adamw_step", f"gradient of '{name}' is not finite")
    s.step += 1
    t = s.step
    bc1 = 1.0 - s.beta1 ** t
    bc2 = 1.0 - s.beta2 ** t
    for (name, p), g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype
        m = s.m.get(name)
        if m is None:
            m = s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
        v = s.v[name]
        if s.weight_decay:
            p.data *= dt.type(1.0 - lr * s.weight_decay)
        m *= dt.type(s.beta1)
        m += dt.type(1.0 - s.beta1) * g
        v *= dt.type(s.beta2)
        v += dt.type(1.0 - s.beta2) * g * g
        denom = np.sqrt(v / dt.type(bc2)) + dt.type(s.eps)
        p.data -= dt.type(lr / bc1) * m / denom


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float
    eval_psnr: Optional[float] = None


@dataclass
class TrainResult:
    model: Model
    opt: OptState
    trace: list
    last_checkpoint: Optional[Path] = None


def _pair_arrays(pair) -> tuple:
    if isinstance(pair, dict):
        return pair["degraded"], pair["clean"]
    return pair


def make_batch(pairs: Sequence, batch: int, seed: int, step: int, dtype=np.float32) -> tuple:
    """Sample and flip a batch; a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, step])
    n = min(batch, len(pairs))
    idx = rng.choice(len(pairs), size=n, replace=False)
    xs, ys = [], []
    for i in idx:
        d, c = flip_augment(_pair_arrays(pairs[int(i)]), int(rng.integers(0, 2 ** 31)))
        xs.append(d.data)
        ys.append(c.data)
    return Tensor(np.concatenate(xs).astype(dtype)), Tensor(np.concatenate(ys).astype(dtype))


def evaluate_psnr(model: Model, pairs: Sequence) -> float:
    """Mean RGB PSNR of restored vs clean over pairs."""
    vals = []
    with T.no_grad():
        for pair in pairs:
            d, c = _pair_arrays(pair)
            out = restore(model, d if isinstance(d, Tensor) else Tensor(d))
            vals.append(psnr(np.clip(out.data, 0, 1), c))
    return float(np.mean(vals))


def train_loop(model: Model, pairs: Sequence, steps: int, batch: int, seed: int, *,
               schedule: Optional[Schedule] = None, opt: Optional[OptState] = None,
               eval_pairs: Optional[Sequence] = None, eval_every: int = 100,
               ckpt_every: int = 0, ckpt_dir=None,
               on_step: Optional[Callable[[TraceRow], None]] = None) -> TrainResult:
    """Run ``steps`` optimizer steps starting from ``opt.step``.

    Batches and flips derive from ``(seed, global step)`` so a run resumed from
    a checkpoint continues exactly where it stopped.
    """
    if not pairs:
        raise DimensionError("train_loop needs a non-empty dataset")
    opt = opt if opt is not None else OptState()
    schedule = schedule if schedule is not None else Schedule(total_steps=max(opt.step + steps, 1))
    named = list(model.named_parameters())
    dtype = named[0][1].dtype
    trace: list = []
    last_ckpt: Optional[Path] = None
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for _ in range(steps):
        step = opt.step
        x, y = make_batch(pairs, batch, seed, step, dtype)
        T.reset_tape()
        model.zero_grad()
        try:
            loss = psnr_loss(restore(model, x), y)
            loss.backward()
            lr = cosine_lr(step, schedule)
            adamw_step(named, [p.grad for _, p in named], opt, lr)
        except NonFiniteError as exc:
            T.reset_tape()
            where = f"; last good checkpoint: {last_ckpt}" if last_ckpt else ""
            raise TrainingAborted(f"step {step}: {exc}{where}") from exc
        row = TraceRow(opt.step, lr, float(loss.data))
        if eval_every and opt.step % eval_every == 0:
            row.eval_psnr = evaluate_psnr(model, eval_pairs if eval_pairs is not None else pairs)
        trace.append(row)
        if on_step is not None:
            on_step(row)
        if ckpt_dir is not None and ckpt_every and opt.step % ckpt_every == 0:
            last_ckpt = ckpt_dir / f"step-{opt.step:07d}.ckpt"
            save_checkpoint(model, opt, last_ckpt)
            log.info("checkpoint %s", last_ckpt)
    return TrainResult(model, opt, trace, last_ckpt)


def write_trace_csv(trace: Sequence[TraceRow], path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "lr", "loss", "eval_psnr"])
        for r in trace:
            w.writerow([r.step, f"{r.lr:.8g}", f"{r.loss:.8g}",
                        "" if r.eval_psnr is None else f"{r.eval_psnr:.6f}"])
