"""Procedural road scenes pairing degraded onboard BEV features with satellite tiles.

Everything is expressed in the ego frame: ``x`` longitudinal (along the grid
columns), ``y`` lateral (along the rows), ego at the centre. A sample is a pure
function of ``(spec, index)``.

BEV features encode the ground-truth layout through a fixed random code,
attenuated as ``exp(-dist / decay_lambda)``, displaced by a smooth distortion
whose magnitude grows with range, and blanked inside the angular shadow of
nearby vehicles. The satellite render sees the whole scene uniformly
but is shifted by a random rigid offset, partly hidden by tree canopies, and
may be missing beyond the coverage limit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from satfuse.config import KVConfig, parse_pair
from satfuse.errors import ConfigError, FormatError
from satfuse.geo import Pose, SatTile, read_tile, write_tile
from satfuse.tensor import Tensor, tsr

BACKGROUND, DIVIDER, CROSSING, BOUNDARY = 0, 1, 2, 3
CLASS_NAMES = ("background", "divider", "crossing", "boundary")
# layout codes for the BEV feature encoding: off-road, road surface, then the map classes
_OFFROAD, _ROAD, _DIV, _CROSS, _BOUND = range(5)
_CODE_SEED = 20240517

RANGES = {"60x30": (30.0, 60.0), "60x60": (60.0, 60.0), "120x60": (60.0, 120.0)}


def parse_range(r) -> tuple[float, float]:
    """``'LONxLAT'`` (metres, longitudinal first as in the range tables) -> (lat, lon)."""
    if isinstance(r, tuple):
        return float(r[0]), float(r[1])
    key = str(r).lower().replace(" ", "")
    if key == "30x60":
        key = "60x30"
    if key in RANGES:
        return RANGES[key]
    try:
        lon, lat = parse_pair(key)
    except ValueError as exc:
        raise ConfigError(f"bev range must be 'LONxLAT' in metres, got {r!r}") from exc
    if lon <= 0 or lat <= 0:
        raise ConfigError(f"bev range must be positive, got {r!r}")
    return float(lat), float(lon)


def _range_pair(v):
    return v if isinstance(v, tuple) else tuple(int(x) for x in str(v).replace(",", "-").split("-"))


@dataclass
class SceneSpec(KVConfig):
    seed: int = 0
    bev_range: str = "60x30"
    H: int = 40
    W: int = 80
    channels: int = 16
    n_dividers: str = "1-3"
    n_crossings: str = "0-2"
    occluders: str = "1-3"
    occluder_extent_deg: float = 30.0
    sat_offset_sigma: float = 1.0
    tree_occlusion_fraction: float = 0.1
    sat_coverage: float = 1.0
    decay_lambda: float = 20.0
    feature_noise: float = 0.03
    range_jitter: float = 1.5  # RMS misplacement (m) of onboard content at 30 m range
    texture_noise: float = 0.03
    intersection_prob: float = 0.4

    def validate(self) -> None:
        for name in ("tree_occlusion_fraction", "sat_coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.sat_offset_sigma < 0 or self.decay_lambda <= 0 or self.range_jitter < 0:
            raise ConfigError("sat_offset_sigma >= 0, range_jitter >= 0 and decay_lambda > 0 required")
        if self.H <= 0 or self.W <= 0 or self.channels <= 0:
            raise ConfigError("grid and channel sizes must be positive")
        parse_range(self.bev_range)
        for name in ("n_dividers", "n_crossings", "occluders"):
            lo, hi = _range_pair(getattr(self, name))
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be 'lo-hi' with 0 <= lo <= hi")

    @property
    def extent(self) -> tuple[float, float]:
        return parse_range(self.bev_range)

    @property
    def cell(self) -> tuple[float, float]:
        lat, lon = self.extent
        return lat / self.H, lon / self.W

    def replace(self, **kw) -> "SceneSpec":
        d = self.to_dict()
        d.update(kw)
        return SceneSpec.from_mapping(d)


@dataclass
class SceneSample:
    f_bev: Tensor  # (H, W, C)
    sat_tile: SatTile  # pixels (3, H, W)
    gt: np.ndarray  # (H, W) int class raster
    meta: dict = field(default_factory=dict)

    @property
    def relevance(self) -> np.ndarray:
        return self.meta["relevance"]


def cell_centres(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame (x longitudinal, y lateral) coordinates of every grid cell centre."""
    lat, lon = spec.extent
    y = ((np.arange(spec.H) + 0.5) / spec.H - 0.5) * lat
    x = ((np.arange(spec.W) + 0.5) / spec.W - 0.5) * lon
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return xx, yy


def feature_code(channels: int) -> np.ndarray:
    """Fixed (5, C) code shared by every sample, rows unit-RMS."""
    rng = np.random.default_rng(_CODE_SEED + channels)
    code = rng.normal(size=(5, channels))
    return code / np.sqrt((code**2).mean(axis=1, keepdims=True))


def _sample_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(index), 0x5A7]))


# ------------------------------------------------------------------ geometry


@dataclass
class _Layout:
    centre: tuple  # (c0, c1, c2): lateral road centre y = c0 + c1 x + c2 x^2
    half_width: float
    divider_offsets: list
    dashed: list
    cross_x: float | None  # longitudinal position of a crossing road
    cross_half_width: float
    crossings: list  # (x_centre, depth) rectangles across the main road


def _draw_layout(rng, spec: SceneSpec) -> _Layout:
    lat, lon = spec.extent
    lo, hi = _range_pair(spec.n_dividers)
    n_div = int(rng.integers(lo, hi + 1))
    lane = rng.uniform(3.0, 3.8)
    half = lane * (n_div + 1) / 2
    c0 = rng.uniform(-0.15, 0.15) * lat
    c1 = rng.uniform(-0.08, 0.08)
    c2 = rng.uniform(-1.0, 1.0) / max(lon, 1.0) ** 2 * 4
    offsets = [-half + lane * (k + 1) for k in range(n_div)]
    dashed = [bool(rng.random() < 0.5) for _ in range(n_div)]
    cross_x = float(rng.uniform(-0.3, 0.3) * lon) if rng.random() < spec.intersection_prob else None
    cross_half = rng.uniform(3.5, 6.0)
    clo, chi = _range_pair(spec.n_crossings)
    n_cross = int(rng.integers(clo, chi + 1))
    crossings = []
    for _ in range(n_cross):
        if cross_x is not None and rng.random() < 0.7:
            side = 1 if rng.random() < 0.5 else -1
            xc = cross_x + side * (cross_half + 2.5)
        else:
            xc = float(rng.uniform(-0.4, 0.4) * lon)
        crossings.append((xc, rng.uniform(3.0, 4.5)))
    return _Layout((c0, c1, c2), half, offsets, dashed, cross_x, cross_half, crossings)


def _rasterise(layout: _Layout, xx: np.ndarray, yy: np.ndarray, line_half: float):
    """Per-cell (class raster, layout-code raster, road mask, crossing-stripe mask)."""
    c0, c1, c2 = layout.centre
    centre = c0 + c1 * xx + c2 * xx**2
    # perpendicular distance is approximated by lateral distance scaled by the local slope
    slope = np.sqrt(1.0 + (c1 + 2 * c2 * xx) ** 2)
    lateral = (yy - centre) / slope
    main_road = np.abs(lateral) <= layout.half_width
    in_cross = np.zeros_like(main_road)
    if layout.cross_x is not None:
        in_cross = np.abs(xx - layout.cross_x) <= layout.cross_half_width
    road = main_road | in_cross

    gt = np.full(xx.shape, BACKGROUND, dtype=np.int64)
    code = np.where(road, _ROAD, _OFFROAD)

    bnd = (np.abs(np.abs(lateral) - layout.half_width) <= line_half) & ~in_cross
    if layout.cross_x is not None:
        cross_edge = (np.abs(np.abs(xx - layout.cross_x) - layout.cross_half_width) <= line_half) & ~main_road
        bnd |= cross_edge
    gt[bnd] = BOUNDARY
    code = np.where(bnd, _BOUND, code)

    div = np.zeros_like(bnd)
    for off, dashed in zip(layout.divider_offsets, layout.dashed):
        d = np.abs(lateral - off) <= line_half
        if dashed:
            d &= np.mod(xx, 6.0) < 3.0
        div |= d
    div &= main_road & ~in_cross
    gt[div] = DIVIDER
    code = np.where(div, _DIV, code)

    stripes = np.zeros_like(bnd)
    crossing = np.zeros_like(bnd)
    for xc, depth in layout.crossings:
        rect = (np.abs(xx - xc) <= depth / 2) & main_road
        crossing |= rect
        stripes |= rect & (np.mod(lateral, 2.0) < 1.0)
    gt[crossing] = CROSSING
    code = np.where(crossing, _CROSS, code)
    return gt, code, road, stripes


def _occluders(rng, spec: SceneSpec):
    """Vehicles near the ego as (bearing, distance) pairs."""
    lo, hi = _range_pair(spec.occluders)
    out = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        dx = rng.uniform(5.0, 15.0) * (1 if rng.random() < 0.5 else -1)
        dy = rng.choice([-3.5, 0.0, 3.5]) + rng.normal(0, 0.3)
        if abs(dy) < 1.0 and abs(dx) < 6.0:
            dx = math.copysign(6.0, dx)
        out.append((math.atan2(dy, dx), math.hypot(dx, dy)))
    return out


def occlusion_mask(xx, yy, occluders, extent_deg: float) -> np.ndarray:
    """Cells inside the angular shadow (beyond the vehicle) of any occluder."""
    bearing = np.arctan2(yy, xx)
    dist = np.hypot(xx, yy)
    half = math.radians(extent_deg) / 2
    mask = np.zeros(xx.shape, dtype=bool)
    for theta, d in occluders:
        diff = np.abs(np.angle(np.exp(1j * (bearing - theta))))
        mask |= (diff <= half) & (dist >= d)
    return mask


def _trees(rng, xx, yy, fraction: float, cell_area: float) -> np.ndarray:
    """Random ellipses painted until ``fraction`` of the cells are covered."""
    mask = np.zeros(xx.shape, dtype=bool)
    if fraction <= 0:
        return mask
    lo_x, hi_x = xx.min(), xx.max()
    lo_y, hi_y = yy.min(), yy.max()
    target = fraction * mask.size
    for _ in range(500):
        if mask.sum() >= target:
            break
        cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        a, b = rng.uniform(2.0, 5.0), rng.uniform(2.0, 5.0)
        ang = rng.uniform(0, math.pi)
        ca, sa = math.cos(ang), math.sin(ang)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    del cell_area
    return mask


def range_distortion(rng, xx, yy, jitter: float) -> tuple[np.ndarray, np.ndarray]:
    """Smooth displacement field (dx, dy) in metres with RMS ``jitter * dist / 30``.

    Stands in for the depth error of onboard perception, which grows with range.
    """
    dist = np.hypot(xx, yy)
    out = []
    for _ in range(2):
        field_ = np.zeros(xx.shape)
        for _ in range(3):
            kx = rng.uniform(1 / 40, 1 / 15) * (1 if rng.random() < 0.5 else -1)
            ky = rng.uniform(-1 / 40, 1 / 40)
            field_ += np.sin(2 * np.pi * (kx * xx + ky * yy) + rng.uniform(0, 2 * np.pi))
        out.append(jitter * dist / 30.0 * field_ * np.sqrt(2.0 / 3.0))
    return out[0], out[1]


# --------------------------------------------------------------- generation


_PALETTE = {
    "offroad": (0.36, 0.33, 0.24),
    "road": (0.42, 0.42, 0.44),
    "marking": (0.92, 0.92, 0.88),
    "boundary": (0.75, 0.72, 0.62),
    "tree": (0.18, 0.42, 0.16),
}


def generate_scene(spec: SceneSpec, index: int) -> SceneSample:
    if index < 0:
        raise ValueError("index must be >= 0")
    rng = _sample_rng(spec, index)
    xx, yy = cell_centres(spec)
    ch, cw = spec.cell
    line_half = 0.5 * max(ch, cw)
    layout = _draw_layout(rng, spec)
    gt = _rasterise(layout, xx, yy, line_half)[0]

    # satellite: same scene sampled at positions shifted back by the true offset
    sigma = spec.sat_offset_sigma
    offset = np.clip(rng.normal(0.0, sigma, size=2), -3 * sigma, 3 * sigma) if sigma > 0 else np.zeros(2)
    off_lat, off_lon = float(offset[0]), float(offset[1])
    _, s_code, s_road, s_stripes = _rasterise(layout, xx - off_lon, yy - off_lat, line_half)
    sat = np.empty((3,) + xx.shape)
    colour = np.where(
        (s_code == _DIV) | (s_code == _CROSS) & s_stripes, 1, np.where(s_code == _BOUND, 2, np.where(s_road, 3, 0))
    )
    for c in range(3):
        lut = np.array([_PALETTE["offroad"][c], _PALETTE["marking"][c], _PALETTE["boundary"][c], _PALETTE["road"][c]])
        sat[c] = lut[colour]
    sat += rng.normal(0.0, spec.texture_noise, size=sat.shape)
    trees = _trees(rng, xx, yy, spec.tree_occlusion_fraction, ch * cw)
    for c in range(3):
        sat[c][trees] = _PALETTE["tree"][c] + rng.normal(0, spec.texture_noise, size=int(trees.sum()))
    covered = np.ones(xx.shape, dtype=bool)
    if spec.sat_coverage < 1.0:
        lat, lon = spec.extent
        side = 1 if rng.random() < 0.5 else -1
        limit = (spec.sat_coverage - 0.5) * lon
        covered = side * xx <= limit
        sat[:, ~covered] = 0.0
    sat = np.clip(sat, 0.0, 1.0).astype(np.float32)
    relevance = s_road & ~trees & covered

    # onboard BEV features: content misplaced by a range-growing distortion
    dx, dy = range_distortion(rng, xx, yy, spec.range_jitter)
    code_ids = _rasterise(layout, xx + dx, yy + dy, line_half)[1]
    code = feature_code(spec.channels)
    dist = np.hypot(xx, yy)
    atten = np.exp(-dist / spec.decay_lambda)
    f = atten[..., None] * code[code_ids] + spec.feature_noise * rng.normal(size=xx.shape + (spec.channels,))
    occ = occlusion_mask(xx, yy, _occluders(rng, spec), spec.occluder_extent_deg)
    f[occ] = 0.0

    pose = Pose(float(rng.uniform(-500, 500)), float(rng.uniform(-500, 500)), float(rng.uniform(-math.pi, math.pi)))
    tile = SatTile(Tensor(sat), pose, spec.extent, int(covered.sum()), covered)
    tags = []
    if occ.any():
        tags.append("occluded")
    if trees.mean() >= 0.05:
        tags.append("tree-covered")
    if not tags:
        tags.append("clean")
    meta = {
        "index": int(index),
        "true_offset_m": [off_lat, off_lon],
        "true_offset_cells": [off_lat / ch, off_lon / cw],
        "occlusion": occ,
        "trees": trees,
        "relevance": relevance,
        "tags": tags,
        "bev_range": spec.bev_range,
    }
    return SceneSample(Tensor(f.astype(np.float32)), tile, gt, meta)


def class_frequencies(samples) -> np.ndarray:
    counts = np.zeros(len(CLASS_NAMES))
    for s in samples:
        counts += np.bincount(s.gt.ravel(), minlength=len(CLASS_NAMES))
    return counts / counts.sum()


# ------------------------------------------------------------------ storage


def _write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8)).save(path)


def _read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def write_sample(out_dir, sid: str, sample: SceneSample) -> None:
    out = Path(out_dir)
    tsr.save(out / f"{sid}_bev.tsr", sample.f_bev.data)
    write_tile(out / f"{sid}_sat", sample.sat_tile, sid)
    _write_mask(out / f"{sid}_gt.png", sample.gt)
    _write_mask(out / f"{sid}_rel.png", sample.meta["relevance"])
    meta = {k: v for k, v in sample.meta.items() if not isinstance(v, np.ndarray)}
    meta["n_occluded"] = int(sample.meta["occlusion"].sum())
    meta["tree_fraction"] = float(sample.meta["trees"].mean())
    (out / f"{sid}.json").write_text(json.dumps(meta, indent=1))


def read_sample(in_dir, sid: str) -> SceneSample:
    src = Path(in_dir)
    try:
        f = tsr.load(src / f"{sid}_bev.tsr")
        meta = json.loads((src / f"{sid}.json").read_text())
        gt = _read_mask(src / f"{sid}_gt.png")
        rel = _read_mask(src / f"{sid}_rel.png").astype(bool)
    except (OSError, ValueError) as exc:
        raise FormatError(f"incomplete sample {sid} in {src}: {exc}") from exc
    tile = read_tile(src / f"{sid}_sat", expected_extent=None)
    meta["relevance"] = rel
    return SceneSample(Tensor(f), tile, gt, meta)


def generate_split(spec: SceneSpec, n: int, out_dir, start: int = 0) -> dict:
    """Write ``n`` samples plus ``manifest.json`` to ``out_dir``."""
    if n <= 0:
        raise ValueError("n must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(start, start + n):
        sid = f"{i:06d}"
        write_sample(out, sid, generate_scene(spec, i))
        entries.append({"id": sid, "index": i, "seed": [int(spec.seed), i]})
    manifest = {"format": "satfuse-synth-1", "spec": spec.to_dict(), "n": n, "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_manifest(in_dir) -> dict:
    try:
        m = json.loads((Path(in_dir) / "manifest.json").read_text())
        m["samples"]
        return m
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"no valid synth manifest in {in_dir}: {exc}") from exc


def load_split(in_dir) -> tuple[SceneSpec, list[SceneSample]]:
    m = read_manifest(in_dir)
    spec = SceneSpec.from_mapping(m["spec"])
    return spec, [read_sample(in_dir, e["id"]) for e in m["samples"]]


def regenerate(manifest: dict, sid: str) -> SceneSample:
    spec = SceneSpec.from_mapping(manifest["spec"])
    entry = next(e for e in manifest["samples"] if e["id"] == sid)
    return generate_scene(spec, int(entry["index"]))


__all__ = [
    "SceneSpec", "SceneSample", "generate_scene", "generate_split", "load_split", "read_manifest", "regenerate",
    "read_sample", "write_sample", "class_frequencies", "occlusion_mask", "cell_centres", "feature_code",
    "parse_range", "CLASS_NAMES", "RANGES",
]
