"""Segmentation IoU / mIoU and Chamfer-distance average precision."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from satfuse.errors import DimensionError, FormatError

CLASS_NAMES = ("background", "divider", "crossing", "boundary")
FOREGROUND = (1, 2, 3)
CHAMFER_THRESHOLDS = (0.5, 1.0, 1.5)


def _check(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def iou(pred, gt, k: int) -> float:
    """|pred=k & gt=k| / |pred=k | gt=k|; 1.0 when both are empty."""
    pred, gt = _check(pred, gt)
    p, g = pred == k, gt == k
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


@dataclass
class IoUReport:
    per_class: dict
    miou: float
    n_samples: int = 0
    counts: dict = field(default_factory=dict)  # class -> (intersection, union)

    def to_table(self) -> dict:
        """Percentages keyed like a results table: Divider / Crossing / Boundary / All."""
        row = {CLASS_NAMES[k].capitalize(): 100.0 * self.per_class[CLASS_NAMES[k]] for k in FOREGROUND}
        row["All"] = 100.0 * self.miou
        return row

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "miou": self.miou, "n_samples": self.n_samples, "table": self.to_table()}


class IoUAccumulator:
    """Pools intersections and unions over a split (dataset-level IoU)."""

    def __init__(self, classes=FOREGROUND):
        self.classes = tuple(classes)
        self.inter = dict.fromkeys(self.classes, 0)
        self.union = dict.fromkeys(self.classes, 0)
        self.n = 0

    def add(self, pred, gt) -> None:
        pred, gt = _check(pred, gt)
        for k in self.classes:
            p, g = pred == k, gt == k
            self.inter[k] += int(np.count_nonzero(p & g))
            self.union[k] += int(np.count_nonzero(p | g))
        self.n += 1

    def report(self) -> IoUReport:
        per = {}
        for k in self.classes:
            per[CLASS_NAMES[k]] = 1.0 if self.union[k] == 0 else self.inter[k] / self.union[k]
        miou = float(np.mean([per[CLASS_NAMES[k]] for k in self.classes]))
        counts = {CLASS_NAMES[k]: (self.inter[k], self.union[k]) for k in self.classes}
        return IoUReport(per, miou, self.n, counts)


def miou(pred, gt) -> IoUReport:
    acc = IoUAccumulator()
    acc.add(pred, gt)
    return acc.report()


# ------------------------------------------------------------------ chamfer AP


def _points(line) -> np.ndarray:
    a = np.asarray(line, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or len(a) == 0:
        raise FormatError(f"polyline must be a non-empty (n, 2) point list, got shape {a.shape}")
    return a


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance: mean of the two directed mean nearest-point distances."""
    a, b = _points(a), _points(b)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def match_instances(pred, gt, threshold: float) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by ascending Chamfer distance, pairs at most ``threshold`` apart."""
    pairs = sorted(
        (chamfer_distance(p, g), i, j) for i, p in enumerate(pred) for j, g in enumerate(gt)
    )
    used_p, used_g, out = set(), set(), []
    for d, i, j in pairs:
        if d > threshold:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, d))
    return out


def average_precision(pred, gt, threshold: float, scores=None) -> float | None:
    """AP of one class at one threshold; ``None`` when there is nothing to score.

    Predictions are ranked by ``scores`` (all equal by default, which makes the
    curve a single operating point) and AP is the area under the step
    precision-recall curve.
    """
    for line in list(pred) + list(gt):
        _points(line)
    if not gt:
        return None if not pred else 0.0
    if not pred:
        return 0.0
    tp = np.zeros(len(pred), dtype=bool)
    for i, _, _ in match_instances(pred, gt, threshold):
        tp[i] = True
    s = np.ones(len(pred)) if scores is None else np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    ap, prev_recall = 0.0, 0.0
    # tied scores form one operating point
    uniq = np.unique(-s[order])
    for level in uniq:
        k = int(np.count_nonzero(-s[order] <= level))
        hits = int(tp[order[:k]].sum())
        recall = hits / len(gt)
        precision = hits / k
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return ap


def chamfer_ap(pred_polylines: dict, gt_polylines: dict, thresholds=CHAMFER_THRESHOLDS, scores: dict | None = None) -> float:
    """AP averaged over thresholds and classes.

    ``pred_polylines`` / ``gt_polylines`` map class -> list of (n, 2) point lists in
    metres. Classes with neither predictions nor ground truth are skipped.
    """
    vals = []
    for cls in sorted(set(pred_polylines) | set(gt_polylines), key=str):
        p = list(pred_polylines.get(cls, []))
        g = list(gt_polylines.get(cls, []))
        sc = None if scores is None else scores.get(cls)
        for t in thresholds:
            ap = average_precision(p, g, t, sc)
            if ap is not None:
                vals.append(ap)
    return float(np.mean(vals)) if vals else 0.0


# ------------------------------------------------- instance extraction (experimental)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labelling; returns (labels with 0 = background, count)."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int64)
    n = 0
    H, W = mask.shape
    for r0, c0 in zip(*np.nonzero(mask)):
        if labels[r0, c0]:
            continue
        n += 1
        labels[r0, c0] = n
        stack = [(r0, c0)]
        while stack:
            r, c = stack.pop()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < H and 0 <= cc < W and mask[rr, cc] and not labels[rr, cc]:
                        labels[rr, cc] = n
                        stack.append((rr, cc))
    return labels, n


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning."""
    img = np.pad(np.asarray(mask, dtype=bool), 1)
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            p = img
            n = [np.roll(np.roll(p, -dr, 0), -dc, 1) for dr, dc in
                 ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))]
            b = sum(x.astype(int) for x in n)
            a = sum(((~n[i]) & n[(i + 1) % 8]).astype(int) for i in range(8))
            if step == 0:
                c1 = ~(n[0] & n[2] & n[4])
                c2 = ~(n[2] & n[4] & n[6])
            else:
                c1 = ~(n[0] & n[2] & n[6])
                c2 = ~(n[0] & n[4] & n[6])
            kill = p & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if kill.any():
                img = p & ~kill
                changed = True
    return img[1:-1, 1:-1]


def extract_instances(raster: np.ndarray, cell: tuple[float, float], classes=FOREGROUND, min_cells: int = 3) -> dict:
    """Class raster -> {class: [points in metres]} via components and skeletons (experimental)."""
    out = {}
    ch, cw = cell
    for k in classes:
        labels, n = connected_components(np.asarray(raster) == k)
        inst = []
        for i in range(1, n + 1):
            comp = labels == i
            if comp.sum() < min_cells:
                continue
            sk = skeletonize(comp)
            r, c = np.nonzero(sk if sk.any() else comp)
            inst.append(np.stack([(c + 0.5) * cw, (r + 0.5) * ch], axis=1))
        out[k] = inst
    return out


# ------------------------------------------------------------------ reports


def evaluate_dirs(pred_dir, gt_dir) -> IoUReport:
    """Pair ``{id}_pred.png`` with ``{id}_gt.png`` by id and pool IoU."""
    from PIL import Image

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = sorted(pred_dir.glob("*_pred.png"))
    if not preds:
        raise FormatError(f"no *_pred.png rasters in {pred_dir}")
    acc = IoUAccumulator()
    for p in preds:
        sid = p.name[: -len("_pred.png")]
        g = gt_dir / f"{sid}_gt.png"
        if not g.exists():
            raise FormatError(f"missing ground truth {g}")
        acc.add(np.asarray(Image.open(p), dtype=np.int64), np.asarray(Image.open(g), dtype=np.int64))
    return acc.report()


def write_report(path, report: IoUReport, extra: dict | None = None) -> None:
    d = report.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=1))


__all__ = [
    "iou", "miou", "IoUReport", "IoUAccumulator", "chamfer_distance", "match_instances", "average_precision",
    "chamfer_ap", "connected_components", "skeletonize", "extract_instances", "evaluate_dirs", "write_report",
    "CHAMFER_THRESHOLDS",
]
