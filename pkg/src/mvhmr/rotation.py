"""Small SO(3) toolbox: axis-angle <-> matrix, derivatives, 6D representation."""

from __future__ import annotations

import numpy as np


class NearZeroColumn(ValueError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for (..., 3) vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coeffs(t: np.ndarray):
    # sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series fallbacks near zero
    small = t < 1e-4
    ts = np.where(small, 1.0, t)
    t2 = t * t
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(ts)) / ts**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (ts - np.sin(ts)) / ts**3)
    return a, b, c


def axis_angle_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    t = np.linalg.norm(rotvec, axis=-1)
    a, b, _ = _coeffs(t)
    K = skew(rotvec)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def left_jacobian(rotvec: np.ndarray) -> np.ndarray:
    """J such that dR/dθ_a · Rᵀ = [J e_a]×  for R = exp([θ]×)."""
    rotvec = np.asarray(rotvec, dtype=float)
    t = np.linalg.norm(rotvec, axis=-1)
    _, b, c = _coeffs(t)
    K = skew(rotvec)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.zeros((flat.shape[0], 3))
    for i, m in enumerate(flat):
        cos = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
        angle = np.arccos(cos)
        w = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
        if angle < 1e-8:
            out[i] = 0.5 * w
        elif np.pi - angle < 1e-6:
            # axis from the symmetric part; sign ambiguity is irrelevant at pi
            S = (m + np.eye(3)) / 2.0
            k = int(np.argmax(np.diag(S)))
            axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
            out[i] = axis / np.linalg.norm(axis) * angle
        else:
            out[i] = w * (angle / (2.0 * np.sin(angle)))
    return out.reshape(R.shape[:-2] + (3,))


def wrap_axis_angle(rotvec: np.ndarray) -> np.ndarray:
    """Map rotation vectors onto the equivalent one with norm <= pi."""
    rotvec = np.array(rotvec, dtype=float)
    t = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    over = t > np.pi
    if not np.any(over):
        return rotvec
    ts = np.where(over, t, 1.0)
    wrapped = rotvec * (1.0 - 2.0 * np.pi * np.floor((ts + np.pi) / (2 * np.pi)) / ts)
    return np.where(over, wrapped, rotvec)


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on the two stored columns; third column by cross product."""
    r6 = np.asarray(r6, dtype=float)
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < 1e-9):
        raise NearZeroColumn("first column of 6D rotation has near-zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < 1e-9):
        raise NearZeroColumn("second column of 6D rotation is parallel to the first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def random_rotation(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    q = rng.normal(size=(4,) if size is None else (size, 4))
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )
    return R


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        return False
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max() <= tol
    return bool(ortho and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))
