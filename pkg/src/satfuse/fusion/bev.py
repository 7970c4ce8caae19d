"""BEV-level fusion: offset prediction, bilinear warp alignment of the satellite
features, concatenation with the refined BEV features, and the segmentation head."""
from __future__ import annotations

import numpy as np

from satfuse.errors import DimensionError
from satfuse.fusion.params import ParamStore, conv_param
from satfuse.tensor import Tensor, ops

CLASSES = ("background", "divider", "crossing", "boundary")


def init_bev_params(store: ParamStore, rng, c: int, offset_hidden: int = 64, dtype=np.float32):
    conv_param(store, rng, "bev.off1", offset_hidden, 2 * c, 3, dtype=dtype)
    conv_param(store, rng, "bev.off2", offset_hidden, offset_hidden, 3, dtype=dtype)
    # zero-initialised so a fresh model warps by the identity
    conv_param(store, rng, "bev.off3", 2, offset_hidden, 1, zero=True, dtype=dtype)


def init_head_params(store: ParamStore, rng, c_in: int, hidden: int = 64, classes: int = 4, dtype=np.float32):
    conv_param(store, rng, "head.c1", hidden, c_in, 3, dtype=dtype)
    conv_param(store, rng, "head.c2", hidden, hidden, 3, dtype=dtype)
    conv_param(store, rng, "head.c3", classes, hidden, 1, dtype=dtype)


def _chw(f: Tensor) -> Tensor:
    return ops.transpose(f, (2, 0, 1))


def _hwc(f: Tensor) -> Tensor:
    return ops.transpose(f, (1, 2, 0))


def _conv(x, p, name, pad):
    return ops.conv2d(x, p[name + ".w"], p[name + ".b"], pad=pad)


def predict_offsets(f_ref: Tensor, f_sat: Tensor, params: dict) -> Tensor:
    """(H, W, 2) offsets in grid cells: component 0 along rows, 1 along columns.

    ``params`` is the ``bev`` sub-dict: 3x3 -> ReLU -> 3x3 -> ReLU -> 1x1.
    """
    if f_ref.shape != f_sat.shape:
        raise DimensionError(f"offset predictor inputs differ: {f_ref.shape} vs {f_sat.shape}")
    x = ops.concat([_chw(f_ref), _chw(f_sat)], axis=0)
    x = ops.relu(_conv(x, params, "off1", 1))
    x = ops.relu(_conv(x, params, "off2", 1))
    return _hwc(_conv(x, params, "off3", 0))


def warp(f_sat: Tensor, delta: Tensor) -> Tensor:
    """Bilinear-kernel warp; see :func:`satfuse.tensor.ops.warp`."""
    return ops.warp(f_sat, delta)


def warp_double_sum(f: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Literal O(H^2 W^2) evaluation of the bilinear-kernel warp, for verification."""
    H, W, C = f.shape
    out = np.zeros((H, W, C), dtype=np.float64)
    hp = np.arange(H)[:, None]
    wp = np.arange(W)[None, :]
    for h in range(H):
        for w in range(W):
            ky = np.maximum(0.0, 1.0 - np.abs(h + delta[h, w, 0] - hp))
            kx = np.maximum(0.0, 1.0 - np.abs(w + delta[h, w, 1] - wp))
            out[h, w] = np.einsum("ij,ijc->c", ky * kx, f)
    return out


def bev_level_fuse(
    f_ref: Tensor,
    f_sat: Tensor,
    params: dict,
    align: bool = True,
    sat_residual: bool = True,
    return_offsets: bool = False,
):
    """Align the satellite features and concatenate with ``f_ref`` -> (H, W, 2C).

    With ``align`` the satellite features are warped by predicted offsets, and with
    ``sat_residual`` the unwarped features are added back to the warped ones.
    """
    if f_ref.shape != f_sat.shape:
        raise DimensionError(f"BEV-level fusion inputs differ: {f_ref.shape} vs {f_sat.shape}")
    delta = None
    if align:
        delta = predict_offsets(f_ref, f_sat, params)
        aligned = warp(f_sat, delta)
        if sat_residual:
            aligned = ops.add(aligned, f_sat)
    else:
        aligned = f_sat
    fused = ops.concat([aligned, f_ref], axis=2)
    if return_offsets:
        return fused, delta
    return fused


def task_head_segmentation(f_fus: Tensor, params: dict) -> Tensor:
    """(H, W, C_in) -> (K, H, W) class logits. ``params`` is the ``head`` sub-dict."""
    x = _chw(f_fus)
    x = ops.relu(_conv(x, params, "c1", 1))
    x = ops.relu(_conv(x, params, "c2", 1))
    return _conv(x, params, "c3", 0)
