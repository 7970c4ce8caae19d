"""``key = value`` configuration files with typed, validated keys."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from satfuse.errors import ConfigError

FUSION_MODES = ("none", "concat", "attention", "masked_attention_d", "masked_attention")


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _float(v: str) -> float:
    s = str(v).strip().lower()
    return math.inf if s in ("inf", "+inf") else float(s)


def parse_pair(v: str, sep: str = "x") -> tuple:
    parts = str(v).lower().replace(",", sep).split(sep)
    if len(parts) != 2:
        raise ValueError(f"expected AxB, got {v!r}")
    return tuple(float(p) if "." in p else int(p) for p in parts)


def _pair(v):
    return v if isinstance(v, tuple) else parse_pair(v)


_CONVERTERS = {"int": int, "float": _float, "bool": _bool, "str": str, "tuple": _pair}


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class KVConfig:
    """Mixin for dataclass configs that load from ``key = value`` mappings."""

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict, allow_unknown: Iterable[str] = ()):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in mapping.items():
            if k not in known:
                if k in allow_unknown:
                    continue
                raise ConfigError(f"unknown config key {k!r} for {cls.__name__}")
            typ = known[k].type
            conv = _CONVERTERS.get(typ if isinstance(typ, str) else typ.__name__, str)
            try:
                kwargs[k] = v if not isinstance(v, str) else conv(v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from exc
        obj = cls(**kwargs)
        obj.validate()
        return obj

    @classmethod
    def from_file(cls, path, overrides: dict | None = None, allow_unknown: Iterable[str] = ()):
        m = read_kv(path) if path else {}
        m.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(m, allow_unknown)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_kv(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, tuple):
                v = "x".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        pass


@dataclass
class ModelConfig(KVConfig):
    H: int = 100
    W: int = 200
    C: int = 64
    patch: int = 5
    c_h: int = 256
    d_meters: float = 5.0
    mask_mode: str = "hard"
    heads: int = 1
    scale_scores: bool = True
    blocks: int = 3
    tau: float = 0.5
    fusion: str = "masked_attention"
    bev_align: bool = True
    sat_residual: bool = True
    identity_init: bool = True
    offset_hidden: int = 64
    head_hidden: int = 64
    enc_hidden: int = 32
    classes: int = 4
    extent_lat: float = 30.0
    extent_lon: float = 60.0

    def validate(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.mask_mode not in ("hard", "soft"):
            raise ConfigError("mask_mode must be hard|soft")
        if self.heads not in (1, 4):
            raise ConfigError("heads must be 1 or 4")
        if self.c_h % self.heads:
            raise ConfigError("c_h must be divisible by heads")
        if self.H % self.patch or self.W % self.patch:
            raise ConfigError(f"patch {self.patch} must divide H={self.H}, W={self.W}")
        if self.blocks < 1 or self.classes < 2:
            raise ConfigError("blocks >= 1 and classes >= 2 required")
        if self.d_meters < 0:
            raise ConfigError("d_meters must be >= 0")


@dataclass
class TrainConfig(KVConfig):
    lr: float = 1e-3
    steps: int = 10000
    batch: int = 4
    seed: int = 0
    aux_weight: float = 0.5
    align_weight: float = 0.0
    log_every: int = 50
    val_fraction: float = 0.0
    class_weights: str = "1,4,4,4"
    grad_clip: float = 5.0
    lr_schedule: str = "constant"  # constant | cosine

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.steps <= 0 or self.batch <= 0:
            raise ConfigError("steps and batch must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be constant|cosine")

    def class_weight_list(self) -> list[float]:
        return [float(x) for x in self.class_weights.split(",")]


def split_run_config(mapping: dict) -> tuple[ModelConfig, TrainConfig]:
    """Split a merged key=value mapping into model and training configs; unknown keys are errors."""
    mk, tk = set(ModelConfig.keys()), set(TrainConfig.keys())
    unknown = set(mapping) - mk - tk
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = ModelConfig.from_mapping({k: v for k, v in mapping.items() if k in mk})
    train = TrainConfig.from_mapping({k: v for k, v in mapping.items() if k in tk})
    return model, train
