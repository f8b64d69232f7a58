"""Minimal reverse-mode autodiff over numpy arrays.

Tensors hold row-major float32 data (float64 is allowed so numeric
oracles can run the same graph in higher precision).  Gradients are
recorded on an explicit tape: ops executed inside a ``with GradTape():``
block append backward closures, ``backward(loss)`` replays them in
reverse execution order.  Outside a tape everything runs as plain
forward numpy, which is what the samplers use.

The op surface is deliberately small: exactly what a toy UNet needs.
No general broadcasting -- only bias-style adds and scalar ops.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_TAPES: list["GradTape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # leaves keep a zero-filled grad buffer so a leaf untouched by
        # backward reads as zero gradient, not as an error
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._tape: GradTape | None = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


class GradTape:
    """Ordered record of ops; reverse replay visits each exactly once.

    Recorded tensors and the tape reference each other, so the graph
    would only die on a full gc cycle pass; exiting the block severs
    those links and the whole step graph frees by refcount.  backward
    must therefore run inside the block.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        for out, _, _ in self._entries:
            out._tape = None
        self._entries.clear()
        return False

    def __len__(self):
        return len(self._entries)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        out.requires_grad = True
        out._leaf = False
        out._tape = tape
        tape._entries.append((out, inputs, bwd))
    return out


def backward(loss: Tensor):
    """Populate .grad on all requires_grad leaves reachable from loss."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss is not connected to a recorded tape")
    tape = loss._tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, bwd in reversed(tape._entries):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, bwd(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad += gi.reshape(inp.shape)
            else:
                prev = pending.get(id(inp))
                pending[id(inp)] = gi if prev is None else prev + gi


# -- elementwise -------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(a.data + np.asarray(s, dtype=a.dtype), (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(a.data * np.asarray(s, dtype=a.dtype), (a,), lambda g: (g * np.asarray(s, dtype=g.dtype),))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (N,C,H,W) + b (N,C) broadcast over the spatial axes."""
    if x.ndim != 4 or b.ndim != 2 or x.shape[:2] != b.shape:
        raise ShapeError(f"add_channel_bias: got {x.shape} and {b.shape}")
    return _record(x.data + b.data[:, :, None, None], (x, b),
                   lambda g: (g, g.sum(axis=(2, 3))))


# -- shape ops ---------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """x[:, start:stop] along axis 1 with zero-padded backward."""
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {x.shape}")
    xshape = x.shape

    def bwd(g):
        gx = np.zeros(xshape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _record(np.ascontiguousarray(x.data[:, start:stop]), (x,), bwd)


# -- reductions --------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.dtype
    return _record(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).astype(dt, copy=False),))


def mean_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.dtype
    n = x.size
    return _record(x.data.mean(), (x,),
                   lambda g: (np.broadcast_to(g / n, shape).astype(dt, copy=False),))


# -- nonlinearities ----------------------------------------------------

def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)
    out = x.data * sig
    xd = x.data
    return _record(out, (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


# -- linear algebra ----------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b over the last axis; x (..., D), w (O, D), b (O,)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight dim {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    xd, wd = x.data, w.data
    lead = int(np.prod(x.shape[:-1], dtype=np.int64))

    def bwd(g):
        g2 = g.reshape(lead, -1)
        x2 = xd.reshape(lead, -1)
        grads = (g @ wd, g2.T @ x2)
        if b is not None:
            return grads + (g2.sum(axis=0),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; leading batch dims must match exactly."""
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record(np.matmul(ad, bd), (a, b),
                   lambda g: (np.matmul(g, bd.swapaxes(-1, -2)),
                              np.matmul(ad.swapaxes(-1, -2), g)))


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"attention: query dim {d} != key dim {k.shape[-1]}")
    scores = mul_scalar(matmul(q, permute(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))),
                        1.0 / np.sqrt(d))
    return matmul(softmax(scores), v)


# -- convolution and resampling ---------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, NCHW x (O,C,kh,kw); odd kernels only."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4d input and weight, got {x.shape}, {w.shape}")
    N, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.shape} kernel {kh}x{kw} stride {s} pad {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(N, C * kh * kw, Ho * Wo)
    out = np.matmul(w.data.reshape(O, -1), cols).reshape(N, O, Ho, Wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
    wd = w.data

    def bwd(g):
        dw = np.empty_like(wd)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
                dw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
        # accumulate input grad in NHWC then transpose once
        dxp = np.zeros((N, xp.shape[2], xp.shape[3], C), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
        dx = dxp.transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:p + H, p:p + W]
        grads = (np.ascontiguousarray(dx), dw)
        if b is not None:
            return grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def avg_pool(x: Tensor, kernel: int | tuple[int, int] = 2) -> Tensor:
    """Non-overlapping average pooling (stride == kernel)."""
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    N, C, H, W = x.shape
    if H % kh or W % kw:
        raise ShapeError(f"avg_pool: {H}x{W} not divisible by {kh}x{kw}")
    out = x.data.reshape(N, C, H // kh, kh, W // kw, kw).mean(axis=(3, 5))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (kh * kw),
                             (N, C, H // kh, kh, W // kw, kw))
        return (gx.reshape(N, C, H, W).astype(g.dtype, copy=False),)

    return _record(out, (x,), bwd)


def nearest_upsample(x: Tensor, scale: int | tuple[int, int] = 2) -> Tensor:
    sh, sw = (scale, scale) if isinstance(scale, int) else scale
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, sh, axis=2), sw, axis=3)

    def bwd(g):
        return (g.reshape(N, C, H, sh, W, sw).sum(axis=(3, 5)),)

    return _record(out, (x,), bwd)


# -- normalization -----------------------------------------------------

def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-group normalization over (channels/groups, H, W), per-channel affine."""
    N, C, H, W = x.shape
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} != ({C},)")
    cg = C // groups
    xg = x.data.reshape(N, groups, cg, H, W)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = np.square(xg - mu).mean(axis=(2, 3, 4), keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * r
    xhat = xhat_g.reshape(N, C, H, W)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    gd = gamma.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gp = (g * gd[None, :, None, None]).reshape(N, groups, cg, H, W)
        m1 = gp.mean(axis=(2, 3, 4), keepdims=True)
        m2 = (gp * xhat_g).mean(axis=(2, 3, 4), keepdims=True)
        dx = (r * (gp - m1 - xhat_g * m2)).reshape(N, C, H, W)
        return (dx.astype(g.dtype, copy=False), dgamma, dbeta)

    return _record(out, (x, gamma, beta), bwd)


# -- embeddings --------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; ids is an integer array, gradient scatters into the table."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1d, got {ids.shape}")
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= table.shape[0]:
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    tshape = table.shape

    def bwd(g):
        dt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record(table.data[ids], (table,), bwd)


def sinusoidal_embedding(ts, dim: int) -> Tensor:
    """Interleaved sin/cos positional features, (N, dim); t=0 -> 0,1,0,1,..."""
    if dim % 2:
        raise ShapeError(f"sinusoidal_embedding: dim must be even, got {dim}")
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = ts[:, None] * freqs[None, :]
    out = np.empty((ts.shape[0], dim), dtype=np.float32)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return Tensor(out)


# -- gradient checking -------------------------------------------------

class NonFiniteGradient(ValueError):
    def __init__(self, index, value):
        super().__init__(f"non-finite value {value!r} at flat coordinate {index}")
        self.index = index


def gradient_check(f, x: np.ndarray, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    The analytic gradient comes from the float32 graph; the numeric
    reference re-evaluates f on float64 perturbations.  Relative error
    per coordinate is |a - n| / max(|n|, 1e-8).
    """
    x = np.asarray(x)
    xt = Tensor(x.astype(np.float32), requires_grad=True)
    with GradTape():
        y = f(xt)
        backward(y)
    analytic = xt.grad.astype(np.float64).ravel()

    x64 = x.astype(np.float64)
    flat = x64.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x64.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x64.copy())).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
        if not np.isfinite(numeric[i]):
            raise NonFiniteGradient(i, numeric[i])
        if not np.isfinite(analytic[i]):
            raise NonFiniteGradient(i, analytic[i])

    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    return float(rel.max())
