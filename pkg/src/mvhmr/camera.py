"""Camera algebra: rig composition, human/world/camera frames, projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotation import is_rotation, matrix_to_rot6d, rot6d_to_matrix  # noqa: F401  (re-exported)

Z_MIN = 1e-6


class PointBehindCamera(ValueError):
    pass


class DegenerateConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    focal: tuple[float, float]
    center: tuple[float, float]
    image_size: tuple[int, int]  # (H, W)
    check_center: bool = True  # crop-frame intrinsics may have their centre outside the crop

    def __post_init__(self):
        if min(self.focal) <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.check_center:
            return
        H, W = self.image_size
        cx, cy = self.center
        if not (-0.5 <= cx <= W - 0.5 + 1.0 and -0.5 <= cy <= H - 0.5 + 1.0):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.focal[0], 0.0, self.center[0]], [0.0, self.focal[1], self.center[1]], [0.0, 0.0, 1.0]]
        )

    def cropped(self, scale: float, offset, size: tuple[int, int]) -> "Intrinsics":
        """Intrinsics of the image obtained by q = scale * p + offset."""
        ox, oy = offset
        return Intrinsics(
            focal=(self.focal[0] * scale, self.focal[1] * scale),
            center=(self.center[0] * scale + ox, self.center[1] * scale + oy),
            image_size=tuple(size),
            check_center=False,
        )


@dataclass(frozen=True)
class Extrinsics:
    """Rigid map p -> R p + T from a source frame into a target frame."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        T = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "Extrinsics":
        Rt = self.rotation.T
        return Extrinsics(Rt, -Rt @ self.translation)

    def then(self, other: "Extrinsics") -> "Extrinsics":
        """Composite map: apply self, then other."""
        return Extrinsics(other.rotation @ self.rotation, other.rotation @ self.translation + other.translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def check(self, tol: float = 1e-9) -> None:
        if not is_rotation(self.rotation, tol):
            raise ValueError("extrinsic rotation is not orthonormal with det +1")


@dataclass(frozen=True)
class OrthoCam:
    scale: float
    translation: tuple[float, float]

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("orthographic scale must be positive")


@dataclass(frozen=True)
class CameraRig:
    """Per-view intrinsics plus world->camera extrinsics."""

    intrinsics: tuple[Intrinsics, ...]
    extrinsics: tuple[Extrinsics, ...]

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", tuple(self.intrinsics))
        object.__setattr__(self, "extrinsics", tuple(self.extrinsics))
        if len(self.intrinsics) != len(self.extrinsics):
            raise ValueError("rig needs one intrinsics per extrinsics")

    def __len__(self) -> int:
        return len(self.extrinsics)

    def translated(self, delta) -> "CameraRig":
        """Same cameras after moving the world origin by -delta (scene shifted by +delta)."""
        delta = np.asarray(delta, dtype=float)
        ext = [Extrinsics(e.rotation, e.translation - e.rotation @ delta) for e in self.extrinsics]
        return CameraRig(self.intrinsics, tuple(ext))


def compose_rig(world_to_cams: list[Extrinsics]) -> list[Extrinsics]:
    """Relative transforms camera-1 -> camera-n (entry 0 is the identity)."""
    if not world_to_cams:
        raise ValueError("at least one camera is required")
    for e in world_to_cams:
        e.check()
    R1, T1 = world_to_cams[0].rotation, world_to_cams[0].translation
    out = [Extrinsics.identity()]
    for e in world_to_cams[1:]:
        R = e.rotation @ R1.T
        out.append(Extrinsics(R, e.translation - R @ T1))
    return out


def human_to_cam(rig_from_cam1: Extrinsics, human_to_cam1: Extrinsics) -> Extrinsics:
    """Human -> camera-n from camera-1 -> camera-n and human -> camera-1."""
    R = rig_from_cam1.rotation @ human_to_cam1.rotation
    T = rig_from_cam1.rotation @ human_to_cam1.translation + rig_from_cam1.translation
    return Extrinsics(R, T)


def world_to_human(
    translation_est, rotation_est, world_to_cams: list[Extrinsics] | None = None
) -> tuple[Extrinsics, list[Extrinsics]]:
    """Canonical human frame from an estimated pelvis position and world->human rotation.

    ``translation_est`` is the pelvis position in world coordinates. Returns the
    world->human transform and, when cameras are given, every human->camera
    transform (rotation R_wc R_whᵀ, translation T_wc + R_wc · pelvis).
    """
    R_wh = np.asarray(rotation_est, dtype=float)
    if not is_rotation(R_wh, 1e-6):
        raise ValueError("rotation estimate is not a rotation matrix")
    t = np.asarray(translation_est, dtype=float).reshape(3)
    w2h = Extrinsics(R_wh, -R_wh @ t)
    per_view = []
    for e in world_to_cams or []:
        per_view.append(Extrinsics(e.rotation @ R_wh.T, e.translation + e.rotation @ t))
    return w2h, per_view


def to_camera(points3d, extr: Extrinsics) -> np.ndarray:
    return extr.apply(points3d)


def project_persp(points3d, extr: Extrinsics, intr: Intrinsics) -> np.ndarray:
    pc = extr.apply(points3d)
    z = pc[..., 2]
    if np.any(z <= Z_MIN):
        raise PointBehindCamera(f"{int(np.sum(z <= Z_MIN))} point(s) at or behind the camera plane")
    fx, fy = intr.focal
    cx, cy = intr.center
    return np.stack([fx * pc[..., 0] / z + cx, fy * pc[..., 1] / z + cy], axis=-1)


def project_ortho(points3d_rot, cam: OrthoCam) -> np.ndarray:
    p = np.asarray(points3d_rot, dtype=float)
    return cam.scale * p[..., :2] + np.asarray(cam.translation, dtype=float)


def fit_ortho(joints3d_rotated, joints2d_observed, weights=None) -> OrthoCam:
    """Least-squares scale and translation for s·(x, y) + t ≈ observed."""
    X = np.asarray(joints3d_rotated, dtype=float)[..., :2].reshape(-1, 2)
    Y = np.asarray(joints2d_observed, dtype=float).reshape(-1, 2)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.sum() <= 0:
        raise DegenerateConfiguration("no joints with positive weight")
    w = w / w.sum()
    xm = w @ X
    ym = w @ Y
    Xc = X - xm
    var = float(w @ np.sum(Xc * Xc, axis=1))
    if var < 1e-12:
        raise DegenerateConfiguration("3D points coincide in the image plane")
    cov = float(w @ np.sum(Xc * (Y - ym), axis=1))
    s = max(cov / var, 1e-9)
    t = ym - s * xm
    return OrthoCam(float(s), (float(t[0]), float(t[1])))


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> Extrinsics:
    """World->camera for a camera at ``position`` looking at ``target``; image y points down."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=float), z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise DegenerateConfiguration("viewing direction parallel to up vector")
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Extrinsics(R, -R @ position)
