"""Hierarchical satellite-map fusion: feature-level attention and BEV-level alignment."""
from satfuse.fusion.bev import bev_level_fuse, predict_offsets, task_head_segmentation, warp, warp_double_sum
from satfuse.fusion.feature import (
    AttentionMask,
    AttentionSettings,
    PatchConfig,
    compose_mask,
    distance_mask,
    feature_level_fuse,
    masked_cross_attention_block,
    patch_embed,
    segmentation_mask,
)
from satfuse.fusion.model import FusionModel, bench_config, full_scale_config
from satfuse.fusion.params import ParamStore, load_checkpoint, save_checkpoint

__all__ = [
    "AttentionMask", "AttentionSettings", "PatchConfig", "compose_mask", "distance_mask", "feature_level_fuse",
    "masked_cross_attention_block", "patch_embed", "segmentation_mask", "bev_level_fuse", "predict_offsets",
    "task_head_segmentation", "warp", "warp_double_sum", "FusionModel", "bench_config", "full_scale_config",
    "ParamStore", "load_checkpoint", "save_checkpoint",
]
