"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementations in ``_fallback`` are used. Setting ``SATFUSE_PURE_PYTHON=1``
forces the fallback.
"""
import os

import numpy as np

from satfuse import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("SATFUSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from satfuse import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, k, stride, pad):
    return _impl.im2col(_c(x), int(k), int(stride), int(pad))


def col2im(cols, C, H, W, k, stride, pad):
    return _impl.col2im(_c(cols), int(C), int(H), int(W), int(k), int(stride), int(pad))


def warp_forward(f, delta):
    return _impl.warp_forward(_c(f), _c(delta.astype(f.dtype, copy=False)))


def warp_backward(f, delta, gout):
    dt = f.dtype
    return _impl.warp_backward(_c(f), _c(delta.astype(dt, copy=False)), _c(gout.astype(dt, copy=False)))


def backends():
    """Return the available kernel modules keyed by name (used by the benchmark)."""
    out = {"python": _fallback}
    try:
        from satfuse import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
