"""Differentiable operations on :class:`Tensor`.

No op mutates its inputs. Binary elementwise ops require identical shapes,
except that a plain array/scalar second operand is treated as a constant and
may broadcast against the tensor.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from satfuse import kernels
from satfuse.errors import DimensionError
from satfuse.tensor.core import Tensor, as_tensor


def _const(x, like: Tensor) -> np.ndarray:
    return np.asarray(x, dtype=like.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return Tensor._make(a.data + c, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """``x + bias`` with a 1-D ``bias`` broadcast along ``axis``."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return Tensor._make(
        x.data + bias.data.reshape(view),
        (x, bias),
        lambda g: (g, g.sum(axis=others)),
    )


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -_const(b, a))
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return Tensor._make(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def softplus(x: Tensor) -> Tensor:
    """Smooth rectifier ``log(1 + exp(x))``."""
    d = x.data
    out = np.logaddexp(0, d).astype(x.dtype)
    sig = _sigmoid(d)
    return Tensor._make(out, (x,), lambda g: (g * sig,))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    half = d.dtype.type(0.5) if isinstance(d, np.ndarray) else 0.5
    return half * (1 + np.tanh(half * d))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1 - s),))


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.log(d), (x,), lambda g: (g / d,))


def clip_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo
    return Tensor._make(np.maximum(x.data, x.dtype.type(lo)), (x,), lambda g: (g * keep,))


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * sgn,))


# ------------------------------------------------------------------ reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(f"concat along {axis}: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return Tensor._make(np.concatenate([t.data for t in xs], axis=axis), xs, back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        out = np.zeros(x.shape, dtype=x.dtype)
        out[idx] = g
        return (out,)

    return Tensor._make(np.ascontiguousarray(x.data[idx]), (x,), back)


def tile_lastdim(x: Tensor, reps: int) -> Tensor:
    """(N, C) -> (N, reps*C) by repeating the whole row ``reps`` times."""
    n, c = x.shape
    return Tensor._make(np.tile(x.data, (1, reps)), (x,), lambda g: (g.reshape(n, reps, c).sum(axis=1),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ weight + bias`` for ``x`` of shape (N, in)."""
    y = matmul(x, weight)
    return add_bias(y, bias, axis=-1) if bias is not None else y


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis.

    ``-inf`` entries get exactly zero weight; a slice that is entirely ``-inf``
    produces all zeros instead of NaN.
    """
    d = x.data
    if d.shape[-1] < 1:
        raise DimensionError("softmax_lastdim: last dimension must be >= 1")
    m = d.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0).astype(d.dtype)
    e = np.exp(d - m)
    s = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), back)


def _densify(w: np.ndarray, idx: np.ndarray, m: int) -> np.ndarray:
    """(N, K) weights at columns ``idx`` -> dense (N, m), summing repeated columns."""
    n = w.shape[0]
    flat = (np.arange(n)[:, None] * m + idx).ravel()
    return np.bincount(flat, weights=w.ravel(), minlength=n * m).reshape(n, m).astype(w.dtype)


def local_attention(q: Tensor, k: Tensor, v: Tensor, idx: np.ndarray, bias: np.ndarray, scale: float = 1.0) -> Tensor:
    """``softmax(bias + scale q_i . k_idx[i]) @ v_idx[i]`` per query row.

    Sparse form of masked attention: query ``i`` only scores the keys listed in
    row ``i`` of ``idx`` (N, K). ``bias`` (N, K) holds the mask values of those
    keys and ``-inf`` in padding slots. Equal to dense attention under a mask
    that is ``-inf`` everywhere outside ``idx``.
    """
    kg, vg = k.data[idx], v.data[idx]
    s = np.matmul(kg, q.data[:, :, None])[..., 0] * q.dtype.type(scale) + bias
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0).astype(s.dtype)
    e = np.exp(s - m)
    tot = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)
    out = np.matmul(p[:, None, :], vg)[:, 0]

    def back(g):
        dp = np.matmul(vg, g[:, :, None])[..., 0]
        ds = p * (dp - (p * dp).sum(axis=-1, keepdims=True)) * q.dtype.type(scale)
        dq = np.matmul(ds[:, None, :], kg)[:, 0]
        dk = _densify(ds, idx, k.shape[0]).T @ q.data
        dv = _densify(p, idx, v.shape[0]).T @ g
        return dq, dk, dv

    return Tensor._make(out, (q, k, v), back)


# ------------------------------------------------------------------ convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D cross-correlation of a (C_in, H, W) map with (C_out, C_in, k, k) weights."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected (C,H,W) input and 4-D kernel, got {x.shape}, {kernel.shape}")
    C, H, W = x.shape
    Co, Ci, k, k2 = kernel.shape
    if Ci != C or k != k2:
        raise DimensionError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if k not in (1, 3):
        raise DimensionError(f"conv2d: kernel size must be 1 or 3, got {k}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d: non-positive output size {(Ho, Wo)} for input {x.shape}, k={k}, pad={pad}")
    dt = x.dtype
    if k == 1 and stride == 1 and pad == 0:
        cols = x.data.reshape(C, H * W)
    else:
        cols = kernels.im2col(x.data, k, stride, pad)
    wmat = kernel.data.reshape(Co, -1).astype(dt, copy=False)
    out = (wmat @ cols).reshape(Co, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(-1, 1, 1)

    def back(g):
        g2 = g.reshape(Co, -1)
        dw = (g2 @ cols.T).reshape(kernel.shape)
        dcols = wmat.T @ g2
        if k == 1 and stride == 1 and pad == 0:
            dx = dcols.reshape(C, H, W)
        else:
            dx = kernels.col2im(dcols, C, H, W, k, stride, pad)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out.astype(dt, copy=False), parents, back)


# ---------------------------------------------------------------------- warp


def warp(f: Tensor, delta: Tensor) -> Tensor:
    """Bilinear warp of an (H, W, C) map by a per-cell (row, col) offset field.

    ``out[h, w] = sum_{h',w'} f[h', w'] * max(0, 1-|h+d1-h'|) * max(0, 1-|w+d2-w'|)``,
    evaluated as a four-neighbour gather; neighbours outside the grid add 0.
    """
    if f.ndim != 3 or delta.shape != (f.shape[0], f.shape[1], 2):
        raise DimensionError(f"warp: offsets {delta.shape} do not match features {f.shape}")
    fd, dd = f.data, delta.data
    out = kernels.warp_forward(fd, dd)

    def back(g):
        df, ddelta = kernels.warp_backward(fd, dd, g)
        return df, ddelta.astype(delta.dtype, copy=False)

    return Tensor._make(out, (f, delta), back)


# ---------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean pixel cross-entropy of (K, H, W) logits against an (H, W) integer target.

    ``weight`` optionally gives a per-class weight; the mean is normalised by the
    summed weight of the targets.
    """
    z = logits.data
    K = z.shape[0]
    t = np.asarray(target).astype(np.int64)
    if t.shape != z.shape[1:]:
        raise DimensionError(f"cross_entropy: target {t.shape} vs logits {z.shape}")
    m = z.max(axis=0, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=0, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[None], axis=0)[0]
    w = np.ones(t.shape, dtype=z.dtype) if weight is None else np.asarray(weight, dtype=z.dtype)[t]
    denom = w.sum()
    loss = -(w * picked).sum() / denom

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[None], 1.0, axis=0)
        return ((p - onehot) * w[None] * (g / denom),)

    del K
    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), back)


def bce_with_logits(logits: Tensor, target: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy; ``valid`` masks out pixels that carry no label."""
    z = logits.data
    y = np.asarray(target, dtype=z.dtype)
    v = np.ones_like(z) if valid is None else np.asarray(valid, dtype=z.dtype)
    n = max(float(v.sum()), 1.0)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = (per * v).sum() / n
    s = _sigmoid(z)
    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), lambda g: ((s - y) * v * (g / n),))


def mse(a: Tensor, target, weight: np.ndarray | None = None) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=a.dtype)
    w = np.ones_like(a.data) if weight is None else np.broadcast_to(np.asarray(weight, dtype=a.dtype), a.shape)
    n = max(float(w.sum()), 1.0)
    diff = a.data - t
    return Tensor._make(np.asarray((w * diff * diff).sum() / n, dtype=a.dtype), (a,), lambda g: (2 * w * diff * (g / n),))


__all__ = [
    "add", "add_bias", "sub", "mul", "scale", "relu", "softplus", "sigmoid", "log", "clip_min", "abs_",
    "sum_", "mean", "reshape", "transpose", "concat", "slice_axis", "tile_lastdim", "matmul", "linear",
    "softmax_lastdim", "local_attention", "conv2d", "warp", "cross_entropy", "bce_with_logits", "mse", "as_tensor",
]
