"""Adam training loop, split evaluation and the offset-recovery diagnostic."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from satfuse.config import ModelConfig, TrainConfig
from satfuse.errors import DimensionError, NumericError
from satfuse.fusion import bev
from satfuse.fusion.model import FusionModel
from satfuse.fusion.params import ParamStore
from satfuse.metrics import IoUAccumulator, IoUReport
from satfuse.tensor import Tensor, no_grad, ops


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, clip: float | None = None) -> float:
        """One update from the accumulated ``.grad`` buffers; returns the global grad norm."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm")
        factor = clip / norm if clip and norm > clip else 1.0
        self.t += 1
        if self.lr == 0:
            return norm
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            g = g * factor
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p = self.params[k]
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return norm


# ------------------------------------------------------------------ losses


def sample_inputs(sample, dtype=np.float32):
    return Tensor(sample.f_bev.data.astype(dtype, copy=False)), Tensor(sample.sat_tile.pixels.data.astype(dtype, copy=False))


def sample_loss(model: FusionModel, sample, tcfg: TrainConfig, class_weight: np.ndarray):
    """Total loss tensor plus a dict of scalar parts."""
    f_bev, sat = sample_inputs(sample, model.dtype)
    out = model.forward(f_bev, sat if model.uses_satellite else None)
    loss = ops.cross_entropy(out.logits, sample.gt, class_weight)
    parts = {"ce": float(loss.data)}
    if out.seg_logits is not None and tcfg.aux_weight > 0:
        aux = ops.bce_with_logits(out.seg_logits, sample.relevance)
        parts["aux"] = float(aux.data)
        loss = ops.add(loss, ops.scale(aux, tcfg.aux_weight))
    if out.delta is not None and tcfg.align_weight > 0 and "true_offset_cells" in sample.meta:
        target = np.broadcast_to(np.asarray(sample.meta["true_offset_cells"], dtype=model.dtype), out.delta.shape)
        al = ops.mean(ops.abs_(ops.sub(out.delta, target)))
        parts["align"] = float(al.data)
        loss = ops.add(loss, ops.scale(al, tcfg.align_weight))
    return loss, parts


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalResult:
    overall: IoUReport
    by_tag: dict
    bev_range: str | None = None

    def to_dict(self) -> dict:
        return {
            "bev_range": self.bev_range,
            "overall": self.overall.to_dict(),
            "by_tag": {k: v.to_dict() for k, v in self.by_tag.items()},
        }


def predict(model: FusionModel, sample) -> np.ndarray:
    f_bev, sat = sample_inputs(sample, model.dtype)
    return model.predict(f_bev, sat if model.uses_satellite else None)


def evaluate(model: FusionModel, samples, bev_range: str | None = None) -> EvalResult:
    """Pooled IoU over ``samples``, overall and per scenario tag."""
    overall = IoUAccumulator()
    tags: dict[str, IoUAccumulator] = {}
    for s in samples:
        if s.gt.shape != (model.cfg.H, model.cfg.W):
            raise DimensionError(f"sample grid {s.gt.shape} does not match model {(model.cfg.H, model.cfg.W)}")
        pred = predict(model, s)
        overall.add(pred, s.gt)
        for t in s.meta.get("tags", ()):
            tags.setdefault(t, IoUAccumulator()).add(pred, s.gt)
    return EvalResult(overall.report(), {k: v.report() for k, v in sorted(tags.items())}, bev_range)


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: FusionModel
    history: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0
    final_val: IoUReport | None = None


def learning_rate(tcfg: TrainConfig, step: int) -> float:
    """Rate for 1-based ``step``; ``cosine`` decays from ``lr`` towards ``lr / 10``."""
    if tcfg.lr_schedule == "cosine":
        return tcfg.lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * (step - 1) / tcfg.steps)))
    return tcfg.lr


def train(
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    train_samples,
    val_samples=None,
    log_path=None,
    out_dir=None,
    val_every: int | None = None,
    model: FusionModel | None = None,
) -> TrainResult:
    """Adam on CE + aux relevance BCE (+ optional offset L1).

    Each step draws ``batch`` samples with a seeded generator and averages their
    gradients. Every ``log_every`` steps a JSON line with the running loss is
    written; val mIoU is added every ``val_every`` steps (default: ``log_every``).
    """
    if not train_samples:
        raise ValueError("no training samples")
    model = model or FusionModel(mcfg, seed=tcfg.seed)
    params = model.params
    opt = Adam(params, tcfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0xDA7A]))
    cw = np.asarray(tcfg.class_weight_list(), dtype=model.dtype)
    if len(cw) != mcfg.classes:
        raise ValueError(f"class_weights has {len(cw)} entries for {mcfg.classes} classes")
    val_every = val_every or tcfg.log_every
    log = open(log_path, "w") if log_path else None
    history, window = [], []
    t0 = time.perf_counter()
    try:
        for step in range(1, tcfg.steps + 1):
            opt.lr = learning_rate(tcfg, step)
            params.zero_grad()
            idx = rng.integers(0, len(train_samples), size=tcfg.batch)
            total = 0.0
            for i in idx:
                loss, parts = sample_loss(model, train_samples[int(i)], tcfg, cw)
                if not math.isfinite(float(loss.data)):
                    raise NumericError(f"loss diverged at step {step}")
                ops.scale(loss, 1.0 / tcfg.batch).backward()
                total += float(loss.data) / tcfg.batch
            try:
                opt.step(tcfg.grad_clip)
            except NumericError as exc:
                raise NumericError(f"{exc} at step {step}") from exc
            window.append(total)
            if step % tcfg.log_every == 0 or step == tcfg.steps:
                rec = {"step": step, "loss": float(np.mean(window)), "seconds": round(time.perf_counter() - t0, 3)}
                window = []
                if val_samples and (step % val_every == 0 or step == tcfg.steps):
                    rec["val_miou"] = evaluate(model, val_samples).overall.miou
                history.append(rec)
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
    finally:
        if log:
            log.close()
    result = TrainResult(model, history, tcfg.steps, time.perf_counter() - t0)
    if val_samples:
        result.final_val = evaluate(model, val_samples).overall
    if out_dir:
        model.save(out_dir, {"train": tcfg.to_dict(), "history": history[-5:]})
    return result


# ------------------------------------------------------------------ offset recovery


def smooth_field(rng, H: int, W: int, C: int, sigma: float = 3.0) -> np.ndarray:
    """Random band-limited features: white noise blurred by a separable Gaussian."""
    pad = int(3 * sigma) + 1
    x = rng.normal(size=(H + 2 * pad, W + 2 * pad, C))
    t = np.arange(-pad, pad + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    x = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 0, x)
    x = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 1, x)
    x /= x.std()
    return x, pad


@dataclass
class OffsetRecovery:
    shift: tuple
    steps: int
    mean_error: float
    frac_within: float
    history: list


def recover_offset(
    shift: tuple[int, int],
    H: int = 24,
    W: int = 32,
    C: int = 8,
    hidden: int = 16,
    steps: int = 2000,
    lr: float = 0.02,
    seed: int = 0,
    tol: float = 0.25,
    stop_early: bool = True,
) -> OffsetRecovery:
    """Train only the offset predictor to undo a known integer shift.

    ``f_ref(h, w) = g(h, w)`` and ``f_sat(h, w) = g(h - s0, w - s1)``, so the warp
    needs ``delta = s`` to realign. The loss is the MSE between the warped
    satellite features and ``f_ref`` on the interior, away from the border where
    the shifted content is missing.
    """
    rng = np.random.default_rng(seed)
    g, pad = smooth_field(rng, H, W, C)
    s0, s1 = shift
    f_ref = Tensor(g[pad:pad + H, pad:pad + W])
    f_sat = Tensor(g[pad - s0:pad - s0 + H, pad - s1:pad - s1 + W])
    margin = max(abs(s0), abs(s1)) + 2
    interior = np.zeros((H, W, 1))
    interior[margin:H - margin, margin:W - margin] = 1.0
    store = ParamStore()
    bev.init_bev_params(store, rng, C, hidden, dtype=np.float64)
    params = store.sub("bev")
    f_ref, f_sat = Tensor(f_ref.data.astype(np.float64)), Tensor(f_sat.data.astype(np.float64))
    opt = Adam(store, lr)
    truth = np.array([s0, s1], dtype=np.float64)
    inner = interior[..., 0] > 0
    history = []
    err, frac, step = math.inf, 0.0, 0
    for step in range(1, steps + 1):
        store.zero_grad()
        delta = bev.predict_offsets(f_ref, f_sat, params)
        loss = ops.mse(ops.warp(f_sat, delta), f_ref, np.broadcast_to(interior, (H, W, C)))
        loss.backward()
        opt.step()
        dist = np.abs(delta.data - truth).max(axis=-1)[inner]
        err, frac = float(np.abs(delta.data - truth)[inner].mean()), float((dist < tol).mean())
        if step % 50 == 0:
            history.append({"step": step, "loss": float(loss.data), "mean_error": err})
        if stop_early and err < tol / 2 and frac >= 0.95:
            break
    with no_grad():
        delta = bev.predict_offsets(f_ref, f_sat, params).data
    err = float(np.abs(delta - truth)[inner].mean())
    frac = float((np.abs(delta - truth).max(axis=-1)[inner] < tol).mean())
    return OffsetRecovery((s0, s1), step, err, frac, history)


__all__ = ["Adam", "learning_rate", "train", "evaluate", "predict", "TrainResult", "EvalResult", "recover_offset", "OffsetRecovery",
           "smooth_field", "sample_loss"]

