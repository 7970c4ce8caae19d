"""World/raster alignment and oriented satellite tile extraction.

Coordinates
-----------
Raster pixel coordinates are continuous ``(px, py)`` = (column, row); pixel
``(r, c)`` covers ``[c, c+1) x [r, r+1)`` so its centre sits at half-integers.
A :class:`GeoTransform` maps world metres to these coordinates with an
orientation-preserving linear part.

A tile is a ``(lateral, longitudinal)`` = (30 m, 60 m) rectangle centred on the
vehicle. Tile columns advance along the heading, tile rows along the vehicle's
left axis, so a yaw-0 tile under the identity transform is a plain crop.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from satfuse.errors import DegenerateConfigurationError, DimensionError, FormatError
from satfuse.tensor import Tensor

TILE_EXTENT = (30.0, 60.0)
DEFAULT_RESIZE = (100, 200)


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(float(d["x"]), float(d["y"]), float(d["yaw"]))


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class GeoTransform:
    """``pixel = linear @ world + offset``.

    For the similarity case ``linear = R(rotation) / scale`` with ``scale`` in
    metres per pixel. ``rms_residual`` is the RMS landmark misfit in pixels when
    the transform came from :func:`solve_landmark_transform`.
    """

    linear: np.ndarray
    offset: np.ndarray
    kind: str = "similarity"
    rms_residual: float = 0.0

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(2, 2)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(2)
        if np.linalg.det(self.linear) <= 0:
            raise DegenerateConfigurationError("transform must preserve orientation (det > 0)")

    @classmethod
    def similarity(cls, scale: float, rotation: float, translation: Sequence[float]) -> "GeoTransform":
        if scale <= 0:
            raise ValueError("scale (metres per pixel) must be positive")
        return cls(_rot(rotation) / scale, np.asarray(translation, dtype=np.float64))

    @classmethod
    def identity(cls) -> "GeoTransform":
        return cls(np.eye(2), np.zeros(2))

    @property
    def scale(self) -> float:
        """Metres per pixel (geometric mean for affine transforms)."""
        return 1.0 / math.sqrt(np.linalg.det(self.linear))

    @property
    def rotation(self) -> float:
        return math.atan2(self.linear[1, 0] - self.linear[0, 1], self.linear[0, 0] + self.linear[1, 1])

    @property
    def translation(self) -> np.ndarray:
        return self.offset

    @property
    def rms_residual_m(self) -> float:
        return self.rms_residual * self.scale

    def world_to_pixel(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.linear.T + self.offset

    def pixel_to_world(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.offset) @ np.linalg.inv(self.linear).T

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "linear": self.linear.tolist(),
            "offset": self.offset.tolist(),
            "scale": self.scale,
            "rotation": self.rotation,
            "rms_residual": self.rms_residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeoTransform":
        if "linear" in d:
            return cls(d["linear"], d["offset"], d.get("kind", "similarity"), float(d.get("rms_residual", 0.0)))
        return cls.similarity(float(d["scale"]), float(d["rotation"]), d["translation"])

    def ident(self) -> str:
        """Short content hash used to tie tiles to the transform that produced them."""
        blob = json.dumps([self.linear.round(12).tolist(), self.offset.round(9).tolist()]).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def solve_landmark_transform(world_pts, pixel_pts, mode: str = "similarity") -> GeoTransform:
    """Least-squares world->pixel transform from landmark pairs.

    ``similarity`` uses the closed-form Procrustes solution with uniform scale
    (Umeyama); ``affine`` solves the 6-parameter linear least-squares problem.
    """
    X = np.asarray(world_pts, dtype=np.float64).reshape(-1, 2)
    Y = np.asarray(pixel_pts, dtype=np.float64).reshape(-1, 2)
    if X.shape != Y.shape:
        raise DimensionError(f"{len(X)} world points vs {len(Y)} pixel points")
    if len(X) < 2:
        raise DegenerateConfigurationError("need at least 2 landmark pairs")
    mx, my = X.mean(0), Y.mean(0)
    dx, dy = X - mx, Y - my
    var_x = (dx**2).sum() / len(X)
    if var_x < 1e-18 or (dy**2).sum() < 1e-18:
        raise DegenerateConfigurationError("landmarks are coincident")

    if mode == "similarity":
        sigma = dy.T @ dx / len(X)
        U, d, Vt = np.linalg.svd(sigma)
        S = np.eye(2)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            S[1, 1] = -1
        R = U @ S @ Vt
        c = float((d * np.diag(S)).sum() / var_x)
        if c <= 0 or np.linalg.det(R) <= 0:
            raise DegenerateConfigurationError("landmarks do not determine an orientation-preserving fit")
        linear = c * R
        kind = "similarity"
    elif mode == "affine":
        if len(X) < 3 or np.linalg.matrix_rank(dx, tol=1e-9) < 2:
            raise DegenerateConfigurationError("affine fit needs 3 non-collinear landmarks")
        sol, *_ = np.linalg.lstsq(dx, dy, rcond=None)
        linear = sol.T
        kind = "affine"
    else:
        raise ValueError(f"unknown transform mode {mode!r}")
    offset = my - linear @ mx
    resid = Y - (X @ linear.T + offset)
    rms = float(np.sqrt((resid**2).sum(axis=1).mean()))
    return GeoTransform(linear, offset, kind, rms)


# ----------------------------------------------------------------- sampling


def bilinear_sample(raster: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Sample a (C, H, W) raster at continuous pixel coordinates.

    Points outside ``[0, W) x [0, H)`` return 0 and are reported invalid;
    valid points near the border clamp to the edge pixel centres.
    Returns ``(values (C, *px.shape), valid bool mask)``.
    """
    C, H, W = raster.shape
    valid = (px >= 0) & (px < W) & (py >= 0) & (py < H)
    u = np.clip(px - 0.5, 0.0, W - 1.0)
    v = np.clip(py - 0.5, 0.0, H - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(H - 2, 0))
    fu, fv = u - u0, v - v0
    u1, v1 = np.minimum(u0 + 1, W - 1), np.minimum(v0 + 1, H - 1)
    r = raster.astype(np.float64, copy=False)
    out = (
        r[:, v0, u0] * ((1 - fv) * (1 - fu))
        + r[:, v0, u1] * ((1 - fv) * fu)
        + r[:, v1, u0] * (fv * (1 - fu))
        + r[:, v1, u1] * (fv * fu)
    )
    return np.where(valid, out, 0.0), valid


def tile_sample_points(pose: Pose, out_res: tuple[int, int], extent=TILE_EXTENT) -> np.ndarray:
    """World coordinates (H_t, W_t, 2) of every tile pixel centre."""
    Ht, Wt = out_res
    lat = ((np.arange(Ht) + 0.5) / Ht - 0.5) * extent[0]
    lon = ((np.arange(Wt) + 0.5) / Wt - 0.5) * extent[1]
    b, a = np.meshgrid(lat, lon, indexing="ij")
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    wx = pose.x + a * c - b * s
    wy = pose.y + a * s + b * c
    return np.stack([wx, wy], axis=-1)


@dataclass
class SatTile:
    pixels: Tensor
    pose: Pose
    extent: tuple = TILE_EXTENT
    valid_count: int = 0
    valid_mask: np.ndarray | None = field(default=None, repr=False)
    transform_id: str = ""

    def __post_init__(self):
        self.extent = tuple(float(e) for e in self.extent)
        px = self.pixels.data if isinstance(self.pixels, Tensor) else np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[0] != 3:
            raise DimensionError(f"tile pixels must be (3, H, W), got {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("tile pixel values must lie in [0, 1]")
        if not isinstance(self.pixels, Tensor):
            self.pixels = Tensor(px.astype(np.float32))

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.pixels.shape[1:])


def extract_tile(raster, transform: GeoTransform, pose: Pose, out_res, extent=TILE_EXTENT) -> SatTile:
    """Bilinearly resample an oriented tile centred on ``pose`` from a district raster."""
    Ht, Wt = (int(v) for v in out_res)
    if Ht <= 0 or Wt <= 0:
        raise DimensionError(f"tile resolution must be positive, got {out_res}")
    r = raster.data if isinstance(raster, Tensor) else np.asarray(raster)
    if r.ndim != 3:
        raise DimensionError(f"raster must be (C, H, W), got {r.shape}")
    pix = transform.world_to_pixel(tile_sample_points(pose, (Ht, Wt), extent))
    vals, valid = bilinear_sample(r, pix[..., 0], pix[..., 1])
    vals = np.clip(vals, 0.0, 1.0).astype(np.float32)
    return SatTile(Tensor(vals), pose, extent, int(valid.sum()), valid, transform.ident())


def resize_tile(tile, out=DEFAULT_RESIZE) -> Tensor:
    """Bilinear resize (half-pixel centres, edge clamp) of a tile to ``out = (H, W)``."""
    img = tile.pixels.data if isinstance(tile, SatTile) else getattr(tile, "data", tile)
    img = np.asarray(img)
    C, H, W = img.shape
    Ho, Wo = out
    if (Ho, Wo) == (H, W):
        return Tensor(img.copy())
    ys = (np.arange(Ho) + 0.5) * (H / Ho)
    xs = (np.arange(Wo) + 0.5) * (W / Wo)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    vals, _ = bilinear_sample(img, px, py)
    return Tensor(np.clip(vals, 0.0, 1.0).astype(img.dtype))


# --------------------------------------------------------------------- I/O


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(path, chw: np.ndarray) -> None:
    Image.fromarray(_to_u8(np.asarray(chw))).save(path)


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_tile(path, tile: SatTile, sample_id: str | None = None) -> None:
    """Write ``{path}.png`` plus a ``{path}.json`` sidecar (``path`` given without suffix)."""
    base = Path(path).with_suffix("")
    write_png(base.with_suffix(".png"), tile.pixels.data)
    meta = {
        "id": sample_id or base.name,
        "pose": tile.pose.to_dict(),
        "extent": list(tile.extent),
        "resolution": list(tile.resolution),
        "transform_id": tile.transform_id,
        "valid_count": int(tile.valid_count),
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def read_tile(path, expected_extent=TILE_EXTENT) -> SatTile:
    base = Path(path).with_suffix("")
    try:
        meta = json.loads(base.with_suffix(".json").read_text())
        pose = Pose.from_dict(meta["pose"])
        extent = tuple(float(e) for e in meta["extent"])
        res = tuple(int(r) for r in meta["resolution"])
        valid_count = int(meta["valid_count"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed tile sidecar {base}.json: {exc}") from exc
    if expected_extent is not None and extent != tuple(float(e) for e in expected_extent):
        raise FormatError(f"tile extent {extent} != expected {tuple(expected_extent)}")
    img = read_png(base.with_suffix(".png"))
    if img.shape[1:] != res:
        raise FormatError(f"tile image is {img.shape[1:]} but sidecar says {res}")
    return SatTile(Tensor(img), pose, extent, valid_count, None, meta.get("transform_id", ""))


def write_tile_dataset(out_dir, tiles: Sequence[SatTile], ids: Sequence[str], transform: GeoTransform) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(tiles) != len(ids):
        raise DimensionError(f"{len(tiles)} tiles vs {len(ids)} ids")
    for sid, tile in zip(ids, tiles):
        write_tile(out / sid, tile, sid)
    manifest = {"ids": list(ids), "transform": transform.to_dict(), "transform_id": transform.ident()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_tile_dataset(in_dir, expected_extent=TILE_EXTENT) -> tuple[list[str], list[SatTile], GeoTransform]:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
        ids = [str(i) for i in manifest["ids"]]
        transform = GeoTransform.from_dict(manifest["transform"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed tile manifest in {src}: {exc}") from exc
    tiles = [read_tile(src / sid, expected_extent) for sid in ids]
    return ids, tiles, transform


# -------------------------------------------------------- district rasters


def load_district_raster(png_path) -> tuple[Tensor, GeoTransform]:
    """Read a district PNG and its ``.json`` sidecar ``{meters_per_pixel, origin}``.

    ``origin`` is the world position of pixel coordinate (0, 0); the sidecar may
    instead carry a full ``transform`` dict (as written by ``solve-align``).
    """
    png = Path(png_path)
    side = png.with_suffix(".json")
    try:
        meta = json.loads(side.read_text())
        if "transform" in meta:
            tf = GeoTransform.from_dict(meta["transform"])
        else:
            mpp = float(meta["meters_per_pixel"])
            origin = np.asarray(meta["origin"], dtype=np.float64).reshape(2)
            tf = GeoTransform.similarity(mpp, 0.0, -origin / mpp)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed raster sidecar {side}: {exc}") from exc
    return Tensor(read_png(png)), tf


def save_district_raster(png_path, raster, meters_per_pixel: float, origin: Sequence[float]) -> None:
    png = Path(png_path)
    write_png(png, getattr(raster, "data", raster))
    png.with_suffix(".json").write_text(
        json.dumps({"meters_per_pixel": float(meters_per_pixel), "origin": [float(o) for o in origin]})
    )


def extract_tiles(raster, transform: GeoTransform, poses: Iterable[Pose], out_res, threads: int = 1) -> list[SatTile]:
    poses = list(poses)
    if threads <= 1 or len(poses) < 2:
        return [extract_tile(raster, transform, p, out_res) for p in poses]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda p: extract_tile(raster, transform, p, out_res), poses))


def read_landmarks(path) -> tuple[np.ndarray, np.ndarray]:
    """Landmark pairs from JSON ``{"world": [[x, y], ...], "pixel": [[u, v], ...]}``
    or CSV with columns ``wx, wy, px, py``."""
    p = Path(path)
    try:
        if p.suffix.lower() == ".csv":
            arr = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
            return arr[:, :2], arr[:, 2:4]
        d = json.loads(p.read_text())
        return np.asarray(d["world"], dtype=np.float64), np.asarray(d["pixel"], dtype=np.float64)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise FormatError(f"cannot read landmarks from {p}: {exc}") from exc


def read_poses(path) -> tuple[list[str], list[Pose]]:
    """Poses from JSON (list of ``{id?, x, y, yaw}``) or CSV ``id,x,y,yaw``."""
    p = Path(path)
    try:
        if p.suffix.lower() == ".csv":
            rows = [ln.split(",") for ln in p.read_text().splitlines()[1:] if ln.strip()]
            ids = [r[0].strip() for r in rows]
            poses = [Pose(float(r[1]), float(r[2]), float(r[3])) for r in rows]
            return ids, poses
        items = json.loads(p.read_text())
        ids = [str(it.get("id", f"{i:06d}")) for i, it in enumerate(items)]
        return ids, [Pose.from_dict(it) for it in items]
    except (OSError, ValueError, KeyError, IndexError, TypeError, AttributeError) as exc:
        raise FormatError(f"cannot read poses from {p}: {exc}") from exc


__all__ = [
    "TILE_EXTENT", "Pose", "GeoTransform", "SatTile", "solve_landmark_transform", "extract_tile",
    "extract_tiles", "resize_tile", "bilinear_sample", "tile_sample_points", "write_tile", "read_tile",
    "write_tile_dataset", "read_tile_dataset", "load_district_raster", "save_district_raster",
    "read_landmarks", "read_poses", "write_png", "read_png", "normalize_angle",
]
