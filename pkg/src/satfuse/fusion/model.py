"""The full fusion stack: satellite encoder, feature-level and BEV-level fusion, task head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from satfuse.config import ModelConfig
from satfuse.errors import CheckpointError, DimensionError
from satfuse.fusion import bev, feature
from satfuse.fusion.params import ParamStore, conv_param, load_checkpoint, save_checkpoint
from satfuse.tensor import Tensor, ops


@dataclass
class ForwardOutput:
    logits: Tensor  # (K, H, W)
    seg_logits: Tensor | None  # (H, W) satellite relevance logits
    delta: Tensor | None  # (H, W, 2) offsets in cells
    f_ref: Tensor | None
    f_sat: Tensor | None


def patch_config(cfg: ModelConfig) -> feature.PatchConfig:
    return feature.PatchConfig(cfg.H, cfg.W, cfg.C, (cfg.patch, cfg.patch), cfg.c_h, (cfg.extent_lat, cfg.extent_lon))


def attention_settings(cfg: ModelConfig) -> feature.AttentionSettings:
    return feature.AttentionSettings(
        d_meters=cfg.d_meters,
        mask_mode=cfg.mask_mode,
        heads=cfg.heads,
        scale_scores=cfg.scale_scores,
        blocks=cfg.blocks,
        tau=cfg.tau,
        use_distance_mask=cfg.fusion in ("masked_attention", "masked_attention_d"),
        use_seg_mask=cfg.fusion == "masked_attention",
        identity_init=cfg.identity_init,
    )


class FusionModel:
    """All learnable parameters plus the forward composition for one configuration.

    ``fusion`` selects the feature-level stage: ``none`` feeds the BEV features
    straight to the head, ``concat`` skips attention and concatenates the
    (optionally aligned) satellite features, the attention modes run the
    cascaded cross-attention with no mask, the distance mask, or distance plus
    segmentation masks.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32, params: ParamStore | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.patch_cfg = patch_config(cfg)
        self.att = attention_settings(cfg)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    @property
    def uses_satellite(self) -> bool:
        return self.cfg.fusion != "none"

    @property
    def uses_attention(self) -> bool:
        return self.cfg.fusion in ("attention", "masked_attention_d", "masked_attention")

    def _init_params(self, rng) -> ParamStore:
        c, dt = self.cfg, self.dtype
        store = ParamStore()
        if self.uses_satellite:
            conv_param(store, rng, "sat.c1", c.enc_hidden, 3, 3, dtype=dt)
            conv_param(store, rng, "sat.c2", c.C, c.enc_hidden, 3, dtype=dt)
            conv_param(store, rng, "sat.c3", c.C, c.C, 1, dtype=dt)
        if self.uses_attention:
            feature.init_feature_params(store, rng, self.patch_cfg, self.att, dtype=dt)
        if self.uses_satellite and c.bev_align:
            bev.init_bev_params(store, rng, c.C, c.offset_hidden, dtype=dt)
        c_in = 2 * c.C if self.uses_satellite else c.C
        bev.init_head_params(store, rng, c_in, c.head_hidden, c.classes, dtype=dt)
        return store

    # ---------------------------------------------------------------- forward

    def encode_satellite(self, sat_img: Tensor) -> Tensor:
        """(3, H, W) RGB -> (H, W, C) satellite features."""
        p = self.params
        x = ops.relu(ops.conv2d(sat_img, p["sat.c1.w"], p["sat.c1.b"], pad=1))
        x = ops.relu(ops.conv2d(x, p["sat.c2.w"], p["sat.c2.b"], pad=1))
        x = ops.conv2d(x, p["sat.c3.w"], p["sat.c3.b"])
        return ops.transpose(x, (1, 2, 0))

    def forward(self, f_bev, sat_img=None, mask: feature.AttentionMask | None = None) -> ForwardOutput:
        c = self.cfg
        f_bev = _as(f_bev, self.dtype)
        if f_bev.shape != (c.H, c.W, c.C):
            raise DimensionError(f"BEV features {f_bev.shape} do not match model {(c.H, c.W, c.C)}")
        if not self.uses_satellite:
            return ForwardOutput(bev.task_head_segmentation(f_bev, self.params.sub("head")), None, None, f_bev, None)
        sat_img = _as(sat_img, self.dtype)
        if sat_img.shape != (3, c.H, c.W):
            raise DimensionError(f"satellite image {sat_img.shape} must be (3, {c.H}, {c.W})")
        f_sat = self.encode_satellite(sat_img)
        seg_logits = None
        if self.uses_attention:
            f_ref, _, seg_logits = feature.feature_level_fuse(
                f_bev, f_sat, self.params.sub("feat"), self.patch_cfg, self.att, mask=mask, return_logits=True
            )
        else:
            f_ref = f_bev
        fused, delta = bev.bev_level_fuse(
            f_ref, f_sat, self.params.sub("bev"), align=c.bev_align, sat_residual=c.sat_residual, return_offsets=True
        )
        logits = bev.task_head_segmentation(fused, self.params.sub("head"))
        return ForwardOutput(logits, seg_logits, delta, f_ref, f_sat)

    def predict(self, f_bev, sat_img=None) -> np.ndarray:
        from satfuse.tensor import no_grad

        with no_grad():
            out = self.forward(f_bev, sat_img)
        return out.logits.data.argmax(axis=0).astype(np.int64)

    # ----------------------------------------------------------- persistence

    def save(self, out_dir, extra: dict | None = None):
        return save_checkpoint(out_dir, self.params, self.cfg.to_dict(), extra)

    @classmethod
    def load(cls, in_dir, cfg: ModelConfig | None = None) -> "FusionModel":
        params, saved_cfg, _ = load_checkpoint(in_dir)
        if cfg is None:
            cfg = ModelConfig.from_mapping(saved_cfg)
        model = cls(cfg, params=None)
        expected = model.params
        for name, t in expected.items():
            if name not in params:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if params[name].shape != t.shape:
                raise CheckpointError(f"parameter {name}: checkpoint {params[name].shape} vs model {t.shape}")
        extra = set(params) - set(expected)
        if extra:
            raise CheckpointError(f"checkpoint has unexpected parameters {sorted(extra)}")
        model.params = ParamStore((k, params[k]) for k in expected)
        model.dtype = next(iter(params.values())).dtype if params else model.dtype
        return model


def _as(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data.astype(dtype))
    return Tensor(np.asarray(x, dtype=dtype))


def full_scale_config(**overrides) -> ModelConfig:
    """Full-scale shapes: (100, 200, 64) features, 5x5 patches, c_h = 256."""
    base = ModelConfig().to_dict()
    base.update(overrides)
    return ModelConfig.from_mapping(base)


def bench_config(**overrides) -> ModelConfig:
    """Desk-scale model used by the synthetic benchmark.

    A (40, 80) grid over the same 30 m x 60 m footprint with 2x2 patches keeps the
    20 x 40 token grid and its 1.5 m pitch, so the 5 m distance mask has the same
    geometry as at full scale.
    """
    base = dict(H=40, W=80, C=16, patch=2, c_h=64, offset_hidden=32, head_hidden=32, enc_hidden=16)
    base.update(overrides)
    return ModelConfig.from_mapping(base)


__all__ = ["FusionModel", "ForwardOutput", "patch_config", "attention_settings", "full_scale_config", "bench_config"]
