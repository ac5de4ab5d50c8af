"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Every differentiable op computes its forward result with numpy, checks it for
non-finite values, and (when any input requires a gradient and recording is
enabled) appends a node to the active :class:`Tape`.  ``Tensor.backward``
replays the tape in exact reverse recording order.

Layout is NCHW, row-major.  The default dtype is float32; float64 tensors are
supported end to end so that finite-difference checks have enough headroom.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ConfigError, NonFiniteError, ProbeError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        _TAPE.backward(self, grad)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # Operator sugar for the elementwise ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# Tape

@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    index: int = 0


@dataclass
class Tape:
    """Ordered record of differentiable ops since the last reset."""

    nodes: list = field(default_factory=list)
    enabled: bool = True
    visited: list = field(default_factory=list)

    def record(self, op: str, inputs: tuple, output: Tensor, backward: BackwardFn) -> Node:
        node = Node(op, inputs, output, backward, len(self.nodes))
        self.nodes.append(node)
        return node

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError("backward() without an explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        self.visited = []
        if loss._node is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, grads[id(loss)])
            return
        stop = loss._node.index
        for node in reversed(self.nodes[: stop + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            self.visited.append(node.index)
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(node.op, "in backward pass")
                if t._node is None:
                    _accumulate_leaf(t, gi)
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        self.reset()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording inside the block."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


# MAC accounting hook; conv/linear/matmul add to it when active.
_MAC_COUNTER: Optional[dict] = None


@contextlib.contextmanager
def count_macs() -> Iterator[dict]:
    """Collect multiply-accumulate counts of conv, linear and matmul ops."""
    global _MAC_COUNTER
    prev = _MAC_COUNTER
    _MAC_COUNTER = {"conv": 0, "linear": 0, "matmul": 0}
    try:
        yield _MAC_COUNTER
    finally:
        _MAC_COUNTER = prev


def _macs(kind: str, n: int) -> None:
    if _MAC_COUNTER is not None:
        _MAC_COUNTER[kind] += int(n)


def _make(op: str, data: np.ndarray, inputs: tuple, backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    rg = _TAPE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._node = _TAPE.record(op, inputs, out, backward)
    return out


def custom_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Record a user-defined op; ``backward`` maps output grad to input grads."""
    return _make(op, np.asarray(data), tuple(inputs), backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and shape ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are reported by _make

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    return _make("scale", x.data * x.dtype.type(s), (x,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError("transpose_last2 needs at least 2 dims")
    out = np.swapaxes(x.data, -1, -2)
    return _make("transpose", out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise DimensionError("concat of zero tensors")
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make("concat", out, xs, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make("slice_channels", x.data[:, start:stop], (x,), backward)


def chunk2(x: Tensor) -> tuple:
    """Split along channels into two equal halves."""
    c = x.shape[1]
    if c % 2:
        raise DimensionError(f"chunk2 needs an even channel count, got {c}")
    return slice_channels(x, 0, c // 2), slice_channels(x, c // 2, c)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _make("global_avg_pool", out, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map on row vectors: x (N, Din), w (Dout, Din), b (Dout,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} vs out dim {w.shape[0]}")
    _macs("linear", x.shape[0] * w.shape[0] * w.shape[1])
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make("linear", out, inputs, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; batch dims must match."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    _macs("matmul", int(np.prod(a.shape[:-2], dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1])
    out = np.matmul(a.data, b.data)

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _make("matmul", out, (a, b), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis of an NCHW tensor at every position."""
    if x.ndim != 4:
        raise DimensionError(f"layer_norm expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs C={c}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gm + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = g * gm
        gx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make("layer_norm", out.astype(x.dtype), (x, gamma, beta), backward)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-channel: (N, C, H, W) -> (N, C*r*r, H/r, W/r)."""
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise DimensionError(f"pixel_unshuffle: H, W = {h}, {w} not divisible by {r}")
    out = x.data.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    out = out.reshape(n, c * r * r, h // r, w // r)

    def backward(g):
        gx = g.reshape(n, c, r, r, h // r, w // r).transpose(0, 1, 4, 2, 5, 3)
        return (gx.reshape(x.shape),)

    return _make("pixel_unshuffle", out, (x,), backward)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Channel-to-space: (N, C, H, W) -> (N, C/(r*r), H*r, W*r)."""
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise DimensionError(f"pixel_shuffle: C = {c} not divisible by {r * r}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def backward(g):
        gx = g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        return (gx.reshape(x.shape),)

    return _make("pixel_shuffle", out, (x,), backward)


def pad_reflect(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad the bottom and right edges; pads longer than the edge reflect repeatedly."""
    n, c, h, w = x.shape
    if pad_h == 0 and pad_w == 0:
        return x
    if h == 0 or w == 0:
        raise DimensionError(f"cannot reflect-pad an empty {h}x{w} image")
    out = np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    rows = np.pad(np.arange(h), (0, pad_h), mode="reflect")
    cols = np.pad(np.arange(w), (0, pad_w), mode="reflect")

    def backward(g):
        gh = np.zeros((n, c, h, w + pad_w), dtype=g.dtype)
        np.add.at(gh, (slice(None), slice(None), rows), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), gh)
        return (gx,)

    return _make("pad_reflect", out, (x,), backward)


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window."""
    if h > x.shape[2] or w > x.shape[3]:
        raise DimensionError(f"crop {h}x{w} larger than {x.shape}")
    if (h, w) == x.shape[2:]:
        return x

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :h, :w] = g
        return (gx,)

    return _make("crop", x.data[:, :, :h, :w], (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    return _make("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


# ---------------------------------------------------------------------------
# Convolution

def _check_conv(x_shape, cin_w: int, cout: int, k: int, kw: int, groups: int, pad: int, stride: int):
    if len(x_shape) != 4:
        raise DimensionError(f"conv2d expects 4-D input, got {x_shape}")
    cin = x_shape[1]
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"conv2d: channels {cin}->{cout} not divisible by groups={groups}")
    if cin_w * groups != cin:
        raise DimensionError(f"conv2d: weight expects {cin_w * groups} input channels, got {cin}")
    if k != kw or k % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square and odd, got {k}x{kw}")
    if pad < 0 or stride < 1:
        raise ConfigError(f"conv2d: invalid pad={pad} / stride={stride}")
    ho = (x_shape[2] + 2 * pad - k) // stride + 1
    wo = (x_shape[3] + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} too large for input {x_shape[2:]} with pad {pad}")
    return ho, wo


def _pad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, Ho*Wo, C*k*k)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)


def _col2im(dcols: np.ndarray, xp_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp_shape[:2]
    d = dcols.reshape(n, ho, wo, c, k, k)
    gxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp


def _unpad(a: np.ndarray, pad: int) -> np.ndarray:
    return a if pad == 0 else a[:, :, pad:-pad, pad:-pad]


def _dense_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int, ho: int, wo: int):
    """Standard conv; returns output and a closure computing (gx, gw)."""
    n = x.shape[0]
    cout, cin, k, _ = w.shape
    if k == 1 and stride == 1 and pad == 0:
        x2 = x.reshape(n, cin, -1)
        w2 = w.reshape(cout, cin)
        out = np.matmul(w2, x2).reshape(n, cout, ho, wo)

        def grads(g):
            g2 = g.reshape(n, cout, -1)
            gx = np.matmul(w2.T, g2).reshape(x.shape)
            gw = np.einsum("nop,ncp->oc", g2, x2, optimize=True).reshape(w.shape)
            return gx, gw

        return out, grads
    xp = _pad(x, pad)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.reshape(cout, -1)
    out = (cols @ w2.T).transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def grads(g):
        g2 = g.reshape(n, cout, ho * wo).transpose(0, 2, 1)
        gw = np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        dcols = g2 @ w2
        gx = _unpad(_col2im(dcols, xp.shape, k, stride, ho, wo), pad)
        return gx, gw

    return out, grads


def _depthwise_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int, ho: int, wo: int):
    """groups == Cin == Cout; accumulates k*k shifted products."""
    k = w.shape[2]
    xp = _pad(x, pad)
    wk = w[:, 0]
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += wk[None, :, i, j, None, None] * xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]

    def grads(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gxp[sl] += wk[None, :, i, j, None, None] * g
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl], optimize=True)
        return _unpad(gxp, pad), gw

    return out, grads


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation with optional bias and channel groups."""
    cout, cin_w, k, kw = w.shape
    ho, wo = _check_conv(x.shape, cin_w, cout, k, kw, groups, pad, stride)
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} vs Cout={cout}")
    n = x.shape[0]
    _macs("conv", n * cout * cin_w * k * k * ho * wo)
    if groups == 1:
        out, grads = _dense_conv(x.data, w.data, stride, pad, ho, wo)
    elif groups == x.shape[1] == cout:
        out, grads = _depthwise_conv(x.data, w.data, stride, pad, ho, wo)
    else:
        cg, og = x.shape[1] // groups, cout // groups
        parts = [_dense_conv(x.data[:, i * cg:(i + 1) * cg], w.data[i * og:(i + 1) * og], stride, pad, ho, wo)
                 for i in range(groups)]
        out = np.concatenate([p[0] for p in parts], axis=1)

        def grads(g):
            res = [p[1](g[:, i * og:(i + 1) * og]) for i, p in enumerate(parts)]
            return np.concatenate([r[0] for r in res], axis=1), np.concatenate([r[1] for r in res], axis=0)

    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx, gw = grads(g)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("conv2d", out.astype(x.dtype, copy=False), inputs, backward)


def conv2d_per_sample(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Convolve sample n with its own kernel ``w[n]`` of shape (Cout, Cin, k, k)."""
    if w.ndim != 5 or w.shape[0] != x.shape[0]:
        raise DimensionError(f"conv2d_per_sample: weights {w.shape} vs input {x.shape}")
    n, cout, cin, k, kw = w.shape
    ho, wo = _check_conv(x.shape, cin, cout, k, kw, 1, pad, stride)
    _macs("conv", n * cout * cin * k * k * ho * wo)
    xp = _pad(x.data, pad)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(n, cout, -1)
    out = np.matmul(cols, w2.transpose(0, 2, 1)).transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g2, cols).reshape(w.shape)
        dcols = np.matmul(g2.transpose(0, 2, 1), w2)
        gx = _unpad(_col2im(dcols, xp.shape, k, stride, ho, wo), pad)
        return gx, gw

    return _make("conv2d_per_sample", out, (x, w), backward)


# ---------------------------------------------------------------------------
# Gradient checking

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
               n_coords: int = 20, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current contents of ``params``.
    All params must be float64.  Coordinates are sampled uniformly without
    replacement across the concatenation of all params (all of them when
    fewer than ``n_coords`` exist).
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("grad_check requires float64 parameters")
        p.grad = None
    reset_tape()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ProbeError("loss is non-finite at the probe point")
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    sizes = [p.data.size for p in params]
    total = int(sum(sizes))
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.cumsum([0] + sizes)

    def probe() -> float:
        with no_grad():
            val = f().data
        if not np.isfinite(val).all():
            raise ProbeError("loss is non-finite during finite differencing")
        return float(val)

    worst = 0.0
    for flat in picks:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[pi])
        view = params[pi].data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + h
        fp = probe()
        view[idx] = orig - h
        fm = probe()
        view[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = float(analytic[pi].reshape(-1)[idx])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
