"""2D representations: silhouettes, joint heatmaps, occupancy maps, crops.

Pixel convention: pixel (row i, col j) has its centre at continuous image
coordinates (x=j, y=i); the image spans [-0.5, W-0.5] x [-0.5, H-0.5].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Z_MIN, Extrinsics, Intrinsics

TAU_HEAT = 1e-3
SIGMA_PX = 4.0
TARGET_SIZE = 256
RENDER_SIZE = (1024, 1024)


class EmptySilhouette(RuntimeError):
    pass


class EmptyForeground(RuntimeError):
    pass


# --------------------------------------------------------------------------- rasterizer


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize_labels(uv: np.ndarray, faces: np.ndarray, size, labels=None, valid=None) -> np.ndarray:
    """Coverage image of 2D triangles; pixel value is the OR of ``1 << label``.

    A pixel is covered when its centre lies inside or on a triangle. Degenerate
    triangles cover nothing. ``valid`` masks out faces (e.g. behind camera).
    """
    H, W = size
    faces = np.asarray(faces, dtype=np.int64)
    if labels is None:
        labels = np.zeros(len(faces), dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if valid is not None:
        faces, labels = faces[valid], labels[valid]
    out = np.zeros((H, W), dtype=np.uint8)
    if len(faces) == 0:
        return out
    # canonical vertex order per face so results do not depend on the index order within a face
    faces = np.sort(faces, axis=1)
    tri = np.asarray(uv, dtype=float)[faces]  # (F, 3, 2)
    x0 = np.maximum(np.ceil(tri[..., 0].min(1)), 0).astype(np.int64)
    x1 = np.minimum(np.floor(tri[..., 0].max(1)), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(tri[..., 1].min(1)), 0).astype(np.int64)
    y1 = np.minimum(np.floor(tri[..., 1].max(1)), H - 1).astype(np.int64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], c[:, 0], c[:, 1])
    keep = (x1 >= x0) & (y1 >= y0) & (area != 0)
    if not np.any(keep):
        return out
    idx = np.flatnonzero(keep)
    w = x1[idx] - x0[idx] + 1
    h = y1[idx] - y0[idx] + 1
    counts = w * h
    # process in chunks to bound memory on huge triangles
    start = 0
    budget = 4_000_000
    while start < len(idx):
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, budget, side="right")))
        sel = idx[start:stop]
        cnt = counts[start:stop]
        fid = np.repeat(np.arange(len(sel)), cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ww = w[start:stop][fid]
        px = x0[sel][fid] + local % ww
        py = y0[sel][fid] + local // ww
        f = sel[fid]
        s = np.sign(area[f])
        e0 = _edge(a[f, 0], a[f, 1], b[f, 0], b[f, 1], px, py) * s
        e1 = _edge(b[f, 0], b[f, 1], c[f, 0], c[f, 1], px, py) * s
        e2 = _edge(c[f, 0], c[f, 1], a[f, 0], a[f, 1], px, py) * s
        inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        bits = (1 << labels[f[inside]]).astype(np.uint8)
        for bit in np.unique(bits):
            m = bits == bit
            out[py[inside][m], px[inside][m]] |= bit
        start = stop
    return out


def project_vertices(vertices, extr: Extrinsics, intr: Intrinsics):
    """Perspective pixel coordinates and a front-of-camera flag (no exception)."""
    pc = extr.apply(vertices)
    z = pc[:, 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    uv = np.stack([intr.focal[0] * pc[:, 0] / zs + intr.center[0], intr.focal[1] * pc[:, 1] / zs + intr.center[1]], 1)
    return uv, front


def rasterize_parts(vertices, faces, extr, intr, render_size=RENDER_SIZE, face_part=None) -> np.ndarray:
    """Per-pixel body-part bits from a perspective render."""
    uv, front = project_vertices(vertices, extr, intr)
    faces = np.asarray(faces)
    valid = front[faces].all(axis=1)
    img = rasterize_labels(uv, faces, render_size, face_part, valid)
    if not img.any():
        raise EmptySilhouette("no triangle projects into the image")
    return img


def rasterize_mask(vertices, faces, extr, intr, render_size=RENDER_SIZE) -> np.ndarray:
    return (rasterize_parts(vertices, faces, extr, intr, render_size) > 0).astype(np.uint8)


# --------------------------------------------------------------------------- heatmaps / occupancy


def joint_heatmaps(joints2d, visibility, size, sigma_px: float = SIGMA_PX) -> np.ndarray:
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    H, W = size
    j = np.asarray(joints2d, dtype=float).reshape(-1, 2)
    vis = np.asarray(visibility, dtype=bool).reshape(-1)
    xs = np.arange(W, dtype=float)
    ys = np.arange(H, dtype=float)
    gx = np.exp(-((xs[None, :] - j[:, :1]) ** 2) / (2 * sigma_px**2))
    gy = np.exp(-((ys[None, :] - j[:, 1:]) ** 2) / (2 * sigma_px**2))
    hm = gy[:, :, None] * gx[:, None, :]
    hm[~vis] = 0.0
    return hm


def occupancy_map(heatmaps, mask, tau: float = TAU_HEAT) -> np.ndarray:
    support = (np.asarray(heatmaps) > tau).sum(axis=0)
    return ((support + np.asarray(mask)) > 0).astype(np.uint8)


# --------------------------------------------------------------------------- crop


@dataclass(frozen=True)
class CropInfo:
    """Similarity q = scale * p + offset from the full render frame into the crop frame."""

    scale: float
    offset: tuple[float, float]
    size: tuple[int, int] = (TARGET_SIZE, TARGET_SIZE)

    def to_crop(self, p):
        return self.scale * np.asarray(p, dtype=float) + np.asarray(self.offset)

    def from_crop(self, q):
        return (np.asarray(q, dtype=float) - np.asarray(self.offset)) / self.scale

    def intrinsics(self, intr: Intrinsics) -> Intrinsics:
        return intr.cropped(self.scale, self.offset, self.size)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "offset": list(self.offset), "size": list(self.size)}

    @classmethod
    def from_dict(cls, d) -> "CropInfo":
        return cls(float(d["scale"]), tuple(float(v) for v in d["offset"]), tuple(int(v) for v in d["size"]))

    @classmethod
    def identity(cls, size=(TARGET_SIZE, TARGET_SIZE)) -> "CropInfo":
        return cls(1.0, (0.0, 0.0), tuple(size))


@dataclass(frozen=True, eq=False)
class ViewObservation:
    heatmaps: np.ndarray  # (N_J, H, W)
    mask: np.ndarray  # (H, W) uint8
    occupancy: np.ndarray  # (H, W) uint8
    joint_visibility: np.ndarray  # (N_J,) bool
    crop: CropInfo
    joints2d: np.ndarray  # (N_J, 2) crop-frame positions the heatmaps were drawn from
    parts: np.ndarray | None = None  # (H, W) uint8 part bits

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def build(cls, joints2d, visibility, mask, crop, parts=None, sigma_px=SIGMA_PX, tau=TAU_HEAT):
        mask = np.asarray(mask, dtype=np.uint8)
        hm = joint_heatmaps(joints2d, visibility, mask.shape, sigma_px)
        return cls(
            heatmaps=hm,
            mask=mask,
            occupancy=occupancy_map(hm, mask, tau),
            joint_visibility=np.asarray(visibility, dtype=bool),
            crop=crop,
            joints2d=np.asarray(joints2d, dtype=float),
            parts=parts,
        )


def foreground_box(mask, joints2d=None, visibility=None):
    """(xmin, ymin, xmax, ymax) inclusive pixel box of mask pixels and visible joint pixels."""
    ys, xs = np.nonzero(mask)
    xs = list(xs)
    ys = list(ys)
    if joints2d is not None:
        H, W = np.shape(mask)
        j = np.rint(np.asarray(joints2d, dtype=float)).astype(np.int64)
        vis = np.ones(len(j), bool) if visibility is None else np.asarray(visibility, bool)
        inside = vis & (j[:, 0] >= 0) & (j[:, 0] < W) & (j[:, 1] >= 0) & (j[:, 1] < H)
        xs += list(j[inside, 0])
        ys += list(j[inside, 1])
    if not xs:
        raise EmptyForeground("no silhouette pixels or visible joints")
    return int(min(xs)), int(min(ys)), int(max(xs)), int(max(ys))


def crop_box(mask, joints2d=None, visibility=None, bbox_scale: float = 1.0, size=TARGET_SIZE) -> CropInfo:
    if not 1.0 <= bbox_scale <= 1.2 + 1e-12:
        raise ValueError("bbox_scale must lie in [1.0, 1.2]")
    xmin, ymin, xmax, ymax = foreground_box(mask, joints2d, visibility)
    cx, cy = (xmin + xmax) / 2.0, (ymin + ymax) / 2.0
    side = max(xmax - xmin + 1, ymax - ymin + 1) * bbox_scale
    k = size / side
    return CropInfo(k, (-(cx - side / 2) * k - 0.5, -(cy - side / 2) * k - 0.5), (size, size))


def resample_nearest(img, crop: CropInfo) -> np.ndarray:
    """Nearest-neighbour resample of a full-frame image into the crop frame (zero padded)."""
    H, W = crop.size
    q = np.stack(np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float)), -1)
    p = np.rint(crop.from_crop(q)).astype(np.int64)
    h0, w0 = img.shape
    ok = (p[..., 0] >= 0) & (p[..., 0] < w0) & (p[..., 1] >= 0) & (p[..., 1] < h0)
    out = np.zeros((H, W), dtype=img.dtype)
    out[ok] = img[p[..., 1][ok], p[..., 0][ok]]
    return out


def resample_bilinear(maps, crop: CropInfo) -> np.ndarray:
    """Bilinear resample of (C, H0, W0) full-frame maps into the crop frame (zero padded)."""
    from .volumetric import bilinear_sample

    H, W = crop.size
    q = np.stack(np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float)), -1).reshape(-1, 2)
    vals = bilinear_sample(np.asarray(maps, dtype=float), crop.from_crop(q))
    return vals.reshape(-1, H, W)


def crop_and_resize(
    parts_full, joints2d_full, visibility, bbox_scale=1.0, size=TARGET_SIZE, sigma_px=SIGMA_PX
) -> ViewObservation:
    """Crop around the foreground and express every map in the 256x256 crop frame.

    The mask is resampled with nearest neighbour; heatmaps are drawn directly
    at the crop-frame joint positions, which is what a bilinear resize of a
    full-resolution Gaussian converges to without the interpolation blur.
    """
    parts_full = np.asarray(parts_full, dtype=np.uint8)
    crop = crop_box(parts_full > 0, joints2d_full, visibility, bbox_scale, size)
    parts = resample_nearest(parts_full, crop)
    j = crop.to_crop(joints2d_full)
    return ViewObservation.build(j, visibility, (parts > 0).astype(np.uint8), crop, parts, sigma_px)


# --------------------------------------------------------------------------- export


def write_pgm(path, img) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    arr = np.frombuffer(data[pos : pos + W * H], dtype=np.uint8)
    if arr.size != W * H:
        raise ValueError(f"{path}: truncated PGM")
    return arr.reshape(H, W).copy()


def write_float_array(path, arr) -> None:
    """Little-endian float32 payload plus a JSON sidecar with the shape."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"dtype": "<f4", "shape": list(arr.shape)}))


def read_float_array(path) -> np.ndarray:
    meta = json.loads(Path(str(path) + ".json").read_text())
    return np.frombuffer(Path(path).read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"]).copy()
