"""Voxel grids in a reference frame and the operations that fill and fuse them."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Z_MIN, Extrinsics, Intrinsics
from .render2d import CropInfo

EPSILON = 1.0
TIE_TOL = 1e-12
GRID_MAGIC = b"MVGRID01"


class AllZeroLikelihood(RuntimeError):
    pass


class SpecMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    G: int
    L: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G must be at least 2")
        if not self.L > 0:
            raise ValueError("L must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def voxel_size(self) -> float:
        return self.L / self.G

    def axis(self) -> np.ndarray:
        return self.L * ((np.arange(self.G) + 0.5) / self.G - 0.5)

    def centers(self) -> np.ndarray:
        """(G, G, G, 3) voxel centres; index order (i, j, k) follows (x, y, z)."""
        a = self.axis()
        grid = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)
        return grid + np.asarray(self.center)

    def recentered(self, center) -> "GridSpec":
        return GridSpec(self.G, self.L, tuple(np.asarray(center, dtype=float)))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    spec: GridSpec
    data: np.ndarray  # (G, G, G, C)
    frame: str = "world"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim == 3:
            d = d[..., None]
        G = self.spec.G
        if d.shape[:3] != (G, G, G):
            raise ValueError(f"grid data shape {d.shape} does not match G={G}")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def channel(self, c: int) -> "VoxelGrid":
        return VoxelGrid(self.spec, self.data[..., c : c + 1], self.frame)


def _check_specs(grids) -> GridSpec:
    if not grids:
        raise ValueError("at least one grid required")
    spec, frame = grids[0].spec, grids[0].frame
    for g in grids[1:]:
        if g.spec != spec or g.frame != frame:
            raise SpecMismatch("grids do not share a GridSpec/frame")
    return spec


# --------------------------------------------------------------------------- sampling


def bilinear_sample(maps: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) maps at (P, 2) continuous (x, y) pixel positions -> (C, P).

    Points outside [0, W-1] x [0, H-1] and non-finite points give zero.
    """
    maps = np.asarray(maps, dtype=float)
    C, H, W = maps.shape
    x = pts[:, 0]
    y = pts[:, 1]
    ok = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xs = np.where(ok, x, 0.0)
    ys = np.where(ok, y, 0.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xs - x0
    fy = ys - y0
    out = (
        maps[:, y0, x0] * ((1 - fx) * (1 - fy))
        + maps[:, y0, x1] * (fx * (1 - fy))
        + maps[:, y1, x0] * ((1 - fx) * fy)
        + maps[:, y1, x1] * (fx * fy)
    )
    return np.where(ok, out, 0.0)


def voxel_pixels(spec: GridSpec, extr: Extrinsics, intr: Intrinsics, crop: CropInfo | None = None, downsample=1):
    """Continuous map coordinates of every voxel centre, NaN when behind the camera."""
    pc = extr.apply(spec.centers().reshape(-1, 3))
    z = pc[:, 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    uv = np.stack([intr.focal[0] * pc[:, 0] / zs + intr.center[0], intr.focal[1] * pc[:, 1] / zs + intr.center[1]], 1)
    if crop is not None:
        uv = crop.to_crop(uv)
    ds = np.broadcast_to(np.asarray(downsample, dtype=float), (2,))
    uv = (uv + 0.5) / ds - 0.5
    uv[~front] = np.nan
    return uv


def unproject(
    map2d, extr: Extrinsics, intr: Intrinsics, spec: GridSpec, crop: CropInfo | None = None, downsample=1,
    frame: str = "world",
) -> VoxelGrid:  # fmt: skip
    """Fill a grid by projecting voxel centres into ``map2d`` and sampling bilinearly.

    ``extr`` maps the grid's frame into the camera; ``intr`` are full-frame
    intrinsics, ``crop`` maps full frame to the map's frame before the
    ``downsample`` factor is applied.
    """
    m = np.asarray(map2d, dtype=float)
    if m.ndim == 2:
        m = m[None]
    uv = voxel_pixels(spec, extr, intr, crop, downsample)
    vals = bilinear_sample(m, uv)
    G = spec.G
    return VoxelGrid(spec, vals.T.reshape(G, G, G, -1), frame)


def pelvis_likelihood(pelvis_maps, extrinsics, intrinsics, crops, spec: GridSpec, downsample=1) -> VoxelGrid:
    acc = None
    for m, e, k, c in zip(pelvis_maps, extrinsics, intrinsics, crops):
        g = unproject(m, e, k, spec, c, downsample).data
        acc = g if acc is None else acc + g
    return VoxelGrid(spec, acc)


def estimate_translation(pelvis_maps, extrinsics, intrinsics, crops, spec: GridSpec, downsample=1) -> np.ndarray:
    """Pelvis position: argmax of the summed unprojected likelihood, ties averaged."""
    grid = pelvis_likelihood(pelvis_maps, extrinsics, intrinsics, crops, spec, downsample)
    return argmax_center(grid)


def argmax_center(grid: VoxelGrid) -> np.ndarray:
    v = grid.data[..., 0]
    top = v.max()
    if not np.any(v != 0) or not np.isfinite(top):
        raise AllZeroLikelihood("summed pelvis likelihood is identically zero")
    ties = v >= top - TIE_TOL
    return grid.spec.centers()[ties].mean(axis=0)


# --------------------------------------------------------------------------- fusion


def binarize(grid: VoxelGrid, threshold: float = 0.5) -> VoxelGrid:
    return VoxelGrid(grid.spec, (grid.data >= threshold).astype(float), grid.frame)


def occupancy_intersection_union(grids) -> tuple[VoxelGrid, VoxelGrid]:
    spec = _check_specs(grids)
    stack = np.stack([binarize(g).data for g in grids])
    return VoxelGrid(spec, stack.min(0), grids[0].frame), VoxelGrid(spec, stack.max(0), grids[0].frame)


def mean_fusion(features) -> VoxelGrid:
    spec = _check_specs(features)
    acc = np.zeros_like(features[0].data)
    for f in features:
        acc = acc + f.data
    return VoxelGrid(spec, acc / len(features), features[0].frame)


def masked_fusion(features, mask: VoxelGrid | None) -> VoxelGrid:
    fused = mean_fusion(features)
    if mask is None:
        return fused
    _check_specs([features[0], mask])
    return VoxelGrid(fused.spec, fused.data * mask.data[..., :1], fused.frame)


def consistency_map(mask, heatmaps, reproj_mask, reproj_heatmaps, epsilon: float = EPSILON) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    hm = np.asarray(heatmaps, dtype=float)
    rhm = np.asarray(reproj_heatmaps, dtype=float)
    dm = np.abs(np.asarray(reproj_mask, dtype=float) - np.asarray(mask, dtype=float))
    dj = np.abs(rhm - hm).sum(axis=0) / hm.shape[0]
    return 1.0 / (epsilon + dm + dj)


def balance_weights(consistency_grids) -> list[VoxelGrid]:
    spec = _check_specs(consistency_grids)
    N = len(consistency_grids)
    den = np.zeros_like(consistency_grids[0].data)
    for g in consistency_grids:
        den = den + g.data
    ok = den > 1e-12
    safe = np.where(ok, den, 1.0)
    return [VoxelGrid(spec, np.where(ok, g.data / safe, 1.0 / N), g.frame) for g in consistency_grids]


def balanced_fusion(features, weights) -> VoxelGrid:
    spec = _check_specs(list(features) + list(weights))
    if len(features) != len(weights):
        raise SpecMismatch("one weight grid per feature grid required")
    acc = np.zeros_like(features[0].data)
    for f, w in zip(features, weights):
        acc = acc + w.data[..., :1] * f.data
    return VoxelGrid(spec, acc, features[0].frame)


# --------------------------------------------------------------------------- dump


def save_grid(path, grid: VoxelGrid) -> None:
    header = json.dumps(
        {
            "G": grid.spec.G,
            "L": grid.spec.L,
            "C": grid.channels,
            "center": list(grid.spec.center),
            "frame": grid.frame,
            "dtype": "<f4",
            "order": "x,y,z,c",
        },
        sort_keys=True,
    ).encode()
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    Path(path).write_bytes(GRID_MAGIC + struct.pack("<I", len(header)) + header + payload)


def load_grid(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid dump")
    (n,) = struct.unpack("<I", raw[8:12])
    h = json.loads(raw[12 : 12 + n])
    G, C = h["G"], h["C"]
    data = np.frombuffer(raw[12 + n :], dtype="<f4")
    if data.size != G**3 * C:
        raise ValueError(f"{path}: payload size does not match header")
    return VoxelGrid(GridSpec(G, h["L"], tuple(h["center"])), data.reshape(G, G, G, C).astype(float), h["frame"])
