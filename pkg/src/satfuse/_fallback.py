"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    C, H, W = x.shape
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # (C, Ho, Wo, k, k) -> (C, k, k, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * k * k, Ho * Wo)


def col2im(cols, C, H, W, k, stride, pad):
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    c6 = cols.reshape(C, k, k, Ho, Wo)
    for ki in range(k):
        for kj in range(k):
            xp[:, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride] += c6[:, ki, kj]
    return np.ascontiguousarray(xp[:, pad : pad + H, pad : pad + W])


def _corners(delta):
    H, W = delta.shape[:2]
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    y = hh + delta[..., 0].astype(np.float64)
    x = ww + delta[..., 1].astype(np.float64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fy, fx = y - y0, x - x0
    out = []
    for a in (0, 1):
        wy = fy if a else 1.0 - fy
        for b in (0, 1):
            wx = fx if b else 1.0 - fx
            yy, xx = y0 + a, x0 + b
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            out.append((a, b, np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1), wy, wx, valid))
    return out


def warp_forward(f, delta):
    out = np.zeros(f.shape, dtype=np.float64)
    for _, _, yy, xx, wy, wx, valid in _corners(delta):
        wgt = np.where(valid, wy * wx, 0.0)
        out += wgt[..., None] * f[yy, xx]
    return out.astype(f.dtype)


def warp_backward(f, delta, gout):
    H, W, C = f.shape
    g = gout.astype(np.float64)
    df = np.zeros((H * W, C), dtype=np.float64)
    dd = np.zeros((H, W, 2), dtype=np.float64)
    for a, b, yy, xx, wy, wx, valid in _corners(delta):
        v = np.where(valid[..., None], f[yy, xx], 0.0)
        wgt = np.where(valid, wy * wx, 0.0)
        flat = (yy * W + xx).ravel()
        contrib = (wgt[..., None] * g).reshape(-1, C)
        for c in range(C):
            df[:, c] += np.bincount(flat, weights=contrib[:, c], minlength=H * W)
        gv = (v * g).sum(axis=-1)
        dd[..., 0] += (1.0 if a else -1.0) * wx * gv
        dd[..., 1] += (1.0 if b else -1.0) * wy * gv
    return df.reshape(H, W, C).astype(f.dtype), dd.astype(f.dtype)
