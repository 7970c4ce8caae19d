"""Feature-level fusion: patch tokens, BEV-satellite attention mask and cascaded
masked cross-attention refining the onboard BEV features with satellite tokens.

Feature maps are (H, W, C). Tokens are row-major over the (H_grid, W_grid) patch
grid; each token flattens its patch in (row, col, channel) order.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from satfuse.errors import DimensionError, NumericError
from satfuse.fusion.params import ParamStore, conv_param, linear_param
from satfuse.tensor import Tensor, ops

NEG_INF = -np.inf


@dataclass(frozen=True)
class PatchConfig:
    H: int = 100
    W: int = 200
    C: int = 64
    patch: tuple = (5, 5)
    c_h: int = 256
    extent: tuple = (30.0, 60.0)  # metres covered by the H and W axes

    def __post_init__(self):
        ph, pw = self.patch
        if self.H % ph or self.W % pw:
            raise DimensionError(f"patch {self.patch} does not divide feature map {(self.H, self.W)}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.patch[0], self.W // self.patch[1]

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_area(self) -> int:
        return self.patch[0] * self.patch[1]

    @property
    def pitch(self) -> tuple[float, float]:
        """Patch size in metres along (H, W)."""
        gh, gw = self.grid
        return self.extent[0] / gh, self.extent[1] / gw


@dataclass(frozen=True)
class AttentionSettings:
    d_meters: float = 5.0
    mask_mode: str = "hard"  # hard | soft
    heads: int = 1
    scale_scores: bool = True
    blocks: int = 3
    tau: float = 0.5
    use_distance_mask: bool = True
    use_seg_mask: bool = True
    identity_init: bool = True


@dataclass
class AttentionMask:
    """Additive pre-softmax mask (N, M). ``values`` may carry gradient in soft mode."""

    values: Tensor
    hard: bool = True
    # optional sparse form (idx, bias), each (N, K): the only keys row i can see
    neighbours: tuple | None = None

    @property
    def shape(self):
        return self.values.shape

    def fully_masked_columns(self) -> np.ndarray:
        return np.isneginf(self.values.data).all(axis=0)

    def fully_masked_rows(self) -> np.ndarray:
        return np.isneginf(self.values.data).all(axis=1)


def init_feature_params(store: ParamStore, rng: np.random.Generator, cfg: PatchConfig, att: AttentionSettings, dtype=np.float32):
    gh, gw = cfg.grid
    d_in, ch = cfg.patch_area * cfg.C, cfg.c_h
    store.add("feat.pe_bev", rng.normal(0.0, 0.02, size=(gh, gw, cfg.C)), dtype)
    store.add("feat.pe_sat", rng.normal(0.0, 0.02, size=(gh, gw, cfg.C)), dtype)
    linear_param(store, rng, "feat.embed_bev", d_in, ch, dtype=dtype)
    linear_param(store, rng, "feat.embed_sat", d_in, ch, dtype=dtype)
    conv_param(store, rng, "feat.seg", 1, cfg.C, 1, dtype=dtype)
    for b in range(att.blocks):
        for nm in ("q", "k", "v"):
            linear_param(store, rng, f"feat.block{b}.{nm}", ch, ch, bias=False, dtype=dtype)
        linear_param(store, rng, f"feat.block{b}.ffn1", ch, 2 * ch, dtype=dtype)
        linear_param(store, rng, f"feat.block{b}.ffn2", 2 * ch, ch, dtype=dtype)
    linear_param(store, rng, "feat.unpatch", ch, d_in, dtype=dtype)
    if att.identity_init:
        # start close to f_ref = f_bev + attention: orthonormal embed with its
        # transpose as unpatch, identity Q, FFN output zero
        a = np.linalg.qr(rng.normal(size=(max(d_in, ch), min(d_in, ch))))[0]
        e = a if d_in >= ch else a.T
        store.add("feat.embed_bev.w", e, dtype)
        store.add("feat.unpatch.w", e.T, dtype)
        for b in range(att.blocks):
            store.add(f"feat.block{b}.q.w", np.eye(ch), dtype)
            store.add(f"feat.block{b}.ffn2.w", np.zeros((2 * ch, ch)), dtype)


# ------------------------------------------------------------------ patching


def patchify(f: Tensor, cfg: PatchConfig) -> Tensor:
    """(H, W, C) -> (N, ph*pw*C)."""
    if f.shape != (cfg.H, cfg.W, cfg.C):
        raise DimensionError(f"feature map {f.shape} does not match config {(cfg.H, cfg.W, cfg.C)}")
    gh, gw = cfg.grid
    ph, pw = cfg.patch
    x = ops.reshape(f, (gh, ph, gw, pw, cfg.C))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    return ops.reshape(x, (gh * gw, ph * pw * cfg.C))


def unpatchify(tokens: Tensor, cfg: PatchConfig) -> Tensor:
    """(N, ph*pw*C) -> (H, W, C); inverse of :func:`patchify`."""
    gh, gw = cfg.grid
    ph, pw = cfg.patch
    x = ops.reshape(tokens, (gh, gw, ph, pw, cfg.C))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    return ops.reshape(x, (cfg.H, cfg.W, cfg.C))


def patch_embed(f: Tensor, pe: Tensor, w: Tensor, b: Tensor | None, cfg: PatchConfig) -> Tensor:
    """Add the per-patch position embedding to every pixel of its patch, flatten
    each patch and project to ``c_h``. Returns (N, c_h) tokens."""
    gh, gw = cfg.grid
    if pe.shape != (gh, gw, cfg.C):
        raise DimensionError(f"position embedding {pe.shape} does not match grid {(gh, gw, cfg.C)}")
    raw = ops.add(patchify(f, cfg), ops.tile_lastdim(ops.reshape(pe, (gh * gw, cfg.C)), cfg.patch_area))
    return ops.linear(raw, w, b)


# --------------------------------------------------------------------- masks


def patch_centers(cfg: PatchConfig) -> np.ndarray:
    gh, gw = cfg.grid
    py, px = cfg.pitch
    r, c = np.meshgrid((np.arange(gh) + 0.5) * py, (np.arange(gw) + 0.5) * px, indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1)


def distance_mask(cfg: PatchConfig, d_meters: float, dtype=np.float32) -> np.ndarray:
    """0 where BEV patch i and satellite patch j centres are within ``d_meters``, else -inf."""
    if d_meters < 0:
        raise ValueError("distance threshold must be >= 0")
    return _distance_mask(cfg.grid, cfg.pitch, float(d_meters), np.dtype(dtype).str).copy()


@functools.lru_cache(maxsize=16)
def _distance_mask(grid, pitch, d_meters, dtype) -> np.ndarray:
    n = grid[0] * grid[1]
    if math.isinf(d_meters):
        return np.zeros((n, n), dtype=dtype)
    r, c = np.meshgrid((np.arange(grid[0]) + 0.5) * pitch[0], (np.arange(grid[1]) + 0.5) * pitch[1], indexing="ij")
    ctr = np.stack([r.ravel(), c.ravel()], axis=1)
    d2 = ((ctr[:, None, :] - ctr[None, :, :]) ** 2).sum(-1)
    return np.where(d2 <= d_meters * d_meters + 1e-9, 0.0, NEG_INF).astype(dtype)


def distance_neighbours(cfg: PatchConfig, d_meters: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row key indices unmasked by the distance mask, padded to a common width.

    Returns ``(idx, pad)``; padding slots repeat index 0 and are flagged in ``pad``.
    """
    return _distance_neighbours(cfg.grid, cfg.pitch, float(d_meters))


@functools.lru_cache(maxsize=16)
def _distance_neighbours(grid, pitch, d_meters):
    ok = np.isfinite(_distance_mask(grid, pitch, d_meters, np.dtype(np.float64).str))
    width = int(ok.sum(axis=1).max())
    idx = np.zeros((ok.shape[0], width), dtype=np.int64)
    pad = np.ones((ok.shape[0], width), dtype=bool)
    for i, row in enumerate(ok):
        js = np.flatnonzero(row)
        idx[i, : len(js)] = js
        pad[i, : len(js)] = False
    idx.setflags(write=False)
    pad.setflags(write=False)
    return idx, pad


def segmentation_logits(f_sat: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution of the satellite features to a (H, W) relevance logit map."""
    x = ops.transpose(f_sat, (2, 0, 1))
    return ops.reshape(ops.conv2d(x, w, b), f_sat.shape[:2])


def patch_mean(seg: Tensor, cfg: PatchConfig) -> Tensor:
    gh, gw = cfg.grid
    ph, pw = cfg.patch
    x = ops.reshape(seg, (gh, ph, gw, pw))
    x = ops.transpose(x, (0, 2, 1, 3))
    return ops.mean(ops.reshape(x, (gh * gw, ph * pw)), axis=1)


def mask_from_probability(seg: Tensor, cfg: PatchConfig, mode: str = "hard", tau: float = 0.5):
    """Pool a (H, W) relevance probability map per patch and turn it into a mask vector.

    hard: 0 if the patch mean is >= ``tau`` else -inf (ndarray, no gradient).
    soft: ``log(p)`` clipped at -30 (Tensor, differentiable).
    """
    pooled = patch_mean(seg, cfg)
    if mode == "hard":
        return np.where(pooled.data >= tau, 0.0, NEG_INF).astype(seg.dtype)
    if mode == "soft":
        return ops.log(ops.clip_min(pooled, math.exp(-30.0)))
    raise ValueError(f"unknown mask mode {mode!r}")


def segmentation_mask(f_sat: Tensor, params: dict, cfg: PatchConfig, mode: str = "hard", tau: float = 0.5):
    """Returns ``(seg (H, W) probabilities, mask_vec (M,))``."""
    seg = ops.sigmoid(segmentation_logits(f_sat, params["seg.w"], params["seg.b"]))
    return seg, mask_from_probability(seg, cfg, mode, tau)


def compose_mask(m_seg_vec, m_dis: np.ndarray) -> AttentionMask:
    """``M = M_seg^T + M_dis``: the per-key vector is added to every query row."""
    m_dis = np.asarray(m_dis)
    if isinstance(m_seg_vec, Tensor):
        if m_seg_vec.shape != (m_dis.shape[1],):
            raise DimensionError(f"segmentation mask {m_seg_vec.shape} vs distance mask {m_dis.shape}")
        return AttentionMask(ops.add_bias(Tensor(m_dis.astype(m_seg_vec.dtype)), m_seg_vec, axis=-1), hard=False)
    v = np.asarray(m_seg_vec)
    if v.shape != (m_dis.shape[1],):
        raise DimensionError(f"segmentation mask {v.shape} vs distance mask {m_dis.shape}")
    return AttentionMask(Tensor(m_dis + v[None, :]), hard=True)


# ----------------------------------------------------------------- attention


def attention_weights(q: Tensor, k: Tensor, mask: AttentionMask | None, scale_scores: bool = True) -> Tensor:
    """``softmax(M + Q K^T [/ sqrt(d)])`` for one head."""
    scores = ops.matmul(q, ops.transpose(k, (1, 0)))
    if scale_scores:
        scores = ops.scale(scores, 1.0 / math.sqrt(q.shape[1]))
    if mask is not None:
        scores = ops.add(scores, mask.values) if mask.values.requires_grad else ops.add(scores, mask.values.data)
    return ops.softmax_lastdim(scores)


def masked_cross_attention_block(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: AttentionMask | None,
    params: dict,
    heads: int = 1,
    scale_scores: bool = True,
    block_index: int = 0,
) -> Tensor:
    """``X = softmax(M + Q K^T) V + Q`` then ``Q_out = FFN(X) + X``.

    ``params`` holds ``ffn1.w/b`` (c_h -> 2 c_h) and ``ffn2.w/b``; the FFN uses a
    softplus hidden activation. Query rows whose mask is all -inf get X = Q.
    """
    n, ch = q.shape
    if k.shape != v.shape or k.shape[1] != ch:
        raise DimensionError(f"block {block_index}: q {q.shape}, k {k.shape}, v {v.shape}")
    if ch % heads:
        raise DimensionError(f"c_h={ch} not divisible by {heads} heads")
    if heads == 1 and mask is not None and mask.neighbours is not None:
        idx, bias = mask.neighbours
        attn = ops.local_attention(q, k, v, idx, bias, 1.0 / math.sqrt(ch) if scale_scores else 1.0)
    elif heads == 1:
        attn = ops.matmul(attention_weights(q, k, mask, scale_scores), v)
    else:
        dh = ch // heads
        parts = []
        for h in range(heads):
            sl = lambda t: ops.slice_axis(t, 1, h * dh, (h + 1) * dh)  # noqa: E731
            parts.append(ops.matmul(attention_weights(sl(q), sl(k), mask, scale_scores), sl(v)))
        attn = ops.concat(parts, axis=1)
    x = ops.add(attn, q)
    hidden = ops.softplus(ops.linear(x, params["ffn1.w"], params["ffn1.b"]))
    out = ops.add(ops.linear(hidden, params["ffn2.w"], params["ffn2.b"]), x)
    if np.isnan(x.data).any() or np.isnan(out.data).any():
        raise NumericError(f"NaN in masked cross-attention block {block_index}")
    return out


def build_mask(f_sat: Tensor, params: dict, cfg: PatchConfig, att: AttentionSettings):
    """Returns ``(mask or None, seg probabilities, seg logits)``; ``params`` is the ``feat`` sub-dict."""
    logits = segmentation_logits(f_sat, params["seg.w"], params["seg.b"])
    seg = ops.sigmoid(logits)
    if not (att.use_distance_mask or att.use_seg_mask):
        return None, seg, logits
    m_dis = distance_mask(cfg, att.d_meters if att.use_distance_mask else math.inf, dtype=f_sat.dtype)
    if att.use_seg_mask:
        m_seg = mask_from_probability(seg, cfg, att.mask_mode, att.tau)
    else:
        m_seg = np.zeros(cfg.n_tokens, dtype=f_sat.dtype)
    mask = compose_mask(m_seg, m_dis)
    if mask.hard and att.use_distance_mask and math.isfinite(att.d_meters):
        # every key outside the distance disc is -inf, so attend over the disc only
        idx, pad = distance_neighbours(cfg, att.d_meters)
        mask.neighbours = (idx, np.where(pad, NEG_INF, m_seg[idx]).astype(f_sat.dtype))
    return mask, seg, logits


def feature_level_fuse(
    f_bev: Tensor,
    f_sat: Tensor,
    params: dict,
    cfg: PatchConfig,
    att: AttentionSettings = AttentionSettings(),
    mask: AttentionMask | None = None,
    return_logits: bool = False,
):
    """Refine ``f_bev`` with ``f_sat`` through ``att.blocks`` cascaded masked
    cross-attention blocks; K and V come from the satellite tokens and stay fixed,
    Q is carried from block to block.

    ``params`` is the ``feat`` sub-dict (keys without the ``feat.`` prefix).
    A precomputed ``mask`` overrides the mask generator. Returns ``(f_ref, seg)``
    (plus the seg logits when ``return_logits``).
    """
    if f_bev.shape != f_sat.shape:
        raise DimensionError(f"BEV features {f_bev.shape} vs satellite features {f_sat.shape}")
    built, seg, logits = build_mask(f_sat, params, cfg, att)
    if mask is None:
        mask = built
    q_tok = patch_embed(f_bev, params["pe_bev"], params["embed_bev.w"], params["embed_bev.b"], cfg)
    s_tok = patch_embed(f_sat, params["pe_sat"], params["embed_sat.w"], params["embed_sat.b"], cfg)
    x = q_tok
    for b in range(att.blocks):
        pre = f"block{b}."
        q = ops.matmul(x, params[pre + "q.w"])
        k = ops.matmul(s_tok, params[pre + "k.w"])
        v = ops.matmul(s_tok, params[pre + "v.w"])
        blk = {"ffn1.w": params[pre + "ffn1.w"], "ffn1.b": params[pre + "ffn1.b"],
               "ffn2.w": params[pre + "ffn2.w"], "ffn2.b": params[pre + "ffn2.b"]}
        x = masked_cross_attention_block(q, k, v, mask, blk, att.heads, att.scale_scores, b)
    f_ref = unpatchify(ops.linear(x, params["unpatch.w"], params["unpatch.b"]), cfg)
    if return_logits:
        return f_ref, seg, logits
    return f_ref, seg
