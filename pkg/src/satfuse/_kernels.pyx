# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: im2col/col2im for direct convolution and the bilinear warp.

Every function here has a numpy twin in ``_fallback`` with the same signature.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

ctypedef fused real:
    float
    double


def im2col(real[:, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((C * k * k, Ho * Wo), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t c, ki, kj, i, j, row, hi, wj
    with nogil:
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    for i in range(Ho):
                        hi = i * stride + ki - pad
                        if hi < 0 or hi >= H:
                            continue
                        for j in range(Wo):
                            wj = j * stride + kj - pad
                            if wj >= 0 and wj < W:
                                cols[row, i * Wo + j] = x[c, hi, wj]
    return out


def col2im(real[:, ::1] cols, int C, int H, int W, int k, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((C, H, W), dtype=dtype)
    cdef real[:, :, ::1] x = out
    cdef Py_ssize_t c, ki, kj, i, j, row, hi, wj
    with nogil:
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    for i in range(Ho):
                        hi = i * stride + ki - pad
                        if hi < 0 or hi >= H:
                            continue
                        for j in range(Wo):
                            wj = j * stride + kj - pad
                            if wj >= 0 and wj < W:
                                x[c, hi, wj] += cols[row, i * Wo + j]
    return out


def warp_forward(real[:, :, ::1] f, real[:, :, ::1] delta):
    cdef Py_ssize_t H = f.shape[0], W = f.shape[1], C = f.shape[2]
    dtype = np.float32 if real is float else np.float64
    result = np.zeros((H, W, C), dtype=dtype)
    cdef real[:, :, ::1] out = result
    cdef Py_ssize_t h, w, c, y0, x0, yy, xx, a, b
    cdef double y, x, fy, fx, wy, wx, wgt
    with nogil:
        for h in range(H):
            for w in range(W):
                y = h + delta[h, w, 0]
                x = w + delta[h, w, 1]
                y0 = <Py_ssize_t>floor(y)
                x0 = <Py_ssize_t>floor(x)
                fy = y - y0
                fx = x - x0
                for a in range(2):
                    yy = y0 + a
                    if yy < 0 or yy >= H:
                        continue
                    wy = fy if a == 1 else 1.0 - fy
                    for b in range(2):
                        xx = x0 + b
                        if xx < 0 or xx >= W:
                            continue
                        wx = fx if b == 1 else 1.0 - fx
                        wgt = wy * wx
                        if wgt == 0.0:
                            continue
                        for c in range(C):
                            out[h, w, c] += <real>(wgt * f[yy, xx, c])
    return result


def warp_backward(real[:, :, ::1] f, real[:, :, ::1] delta, real[:, :, ::1] gout):
    cdef Py_ssize_t H = f.shape[0], W = f.shape[1], C = f.shape[2]
    dtype = np.float32 if real is float else np.float64
    df_arr = np.zeros((H, W, C), dtype=dtype)
    dd_arr = np.zeros((H, W, 2), dtype=dtype)
    cdef real[:, :, ::1] df = df_arr
    cdef real[:, :, ::1] dd = dd_arr
    cdef Py_ssize_t h, w, c, y0, x0, yy, xx, a, b
    cdef double y, x, fy, fx, wy, wx, dwy, dwx, g, acc_y, acc_x, v
    with nogil:
        for h in range(H):
            for w in range(W):
                y = h + delta[h, w, 0]
                x = w + delta[h, w, 1]
                y0 = <Py_ssize_t>floor(y)
                x0 = <Py_ssize_t>floor(x)
                fy = y - y0
                fx = x - x0
                acc_y = 0.0
                acc_x = 0.0
                for a in range(2):
                    yy = y0 + a
                    if yy < 0 or yy >= H:
                        continue
                    wy = fy if a == 1 else 1.0 - fy
                    dwy = 1.0 if a == 1 else -1.0
                    for b in range(2):
                        xx = x0 + b
                        if xx < 0 or xx >= W:
                            continue
                        wx = fx if b == 1 else 1.0 - fx
                        dwx = 1.0 if b == 1 else -1.0
                        for c in range(C):
                            g = gout[h, w, c]
                            v = f[yy, xx, c]
                            df[yy, xx, c] += <real>(wy * wx * g)
                            acc_y += dwy * wx * v * g
                            acc_x += wy * dwx * v * g
                dd[h, w, 0] = <real>acc_y
                dd[h, w, 1] = <real>acc_x
    return df_arr, dd_arr
