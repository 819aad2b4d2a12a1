"""Pose and shape errors: MPJPE, PMPJPE, PVE, PPVE (reported in millimetres)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .bodymodel import PELVIS

CSV_COLUMNS = ("sample", "mode", "mpjpe_mm", "pmpjpe_mm", "pve_mm", "ppve_mm")


class DegenerateSet(ValueError):
    pass


def procrustes_align(pred, gt):
    """Similarity (s, R, t) minimising sum |s R pred_i + t - gt_i|^2 with det R = +1."""
    X = np.asarray(pred, dtype=float)
    Y = np.asarray(gt, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("pred and gt must both be (P, 3)")
    if len(X) < 3:
        raise DegenerateSet("need at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    sy = np.linalg.svd(Yc, compute_uv=False)
    if sx[0] < 1e-12 or sx[1] < 1e-9 * sx[0] or sy[0] < 1e-12 or sy[1] < 1e-9 * sy[0]:
        raise DegenerateSet("points are coincident or collinear")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / np.sum(Xc * Xc))
    t = my - s * R @ mx
    return s, R, t


def apply_similarity(points, s, R, t):
    return s * np.asarray(points) @ R.T + t


def mpjpe(pred, gt, root: int = PELVIS) -> float:
    """Mean joint error after aligning the root joints (metres)."""
    p = np.asarray(pred) - np.asarray(pred)[root]
    g = np.asarray(gt) - np.asarray(gt)[root]
    return float(np.linalg.norm(p - g, axis=1).mean())


def pmpjpe(pred, gt) -> float:
    s, R, t = procrustes_align(pred, gt)
    return float(np.linalg.norm(apply_similarity(pred, s, R, t) - gt, axis=1).mean())


def pve(pred_verts, gt_verts, pred_root, gt_root) -> float:
    p = np.asarray(pred_verts) - np.asarray(pred_root)
    g = np.asarray(gt_verts) - np.asarray(gt_root)
    return float(np.linalg.norm(p - g, axis=1).mean())


def ppve(pred_verts, gt_verts) -> float:
    return pmpjpe(pred_verts, gt_verts)


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    mode: str = ""

    @property
    def count(self) -> int:
        return len(self.rows)

    def aggregate(self) -> dict:
        agg = {"sample": "mean", "mode": self.mode}
        for c in CSV_COLUMNS[2:]:
            agg[c] = float(np.mean([r[c] for r in self.rows])) if self.rows else float("nan")
        return agg

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows + [self.aggregate()]:
            w.writerow([r["sample"], r["mode"]] + [f"{r[c]:.6f}" for c in CSV_COLUMNS[2:]])
        return buf.getvalue()


def sample_errors(pred_verts, pred_joints, gt_verts, gt_joints) -> dict:
    """All four errors in millimetres for one sample (world orientation, any translation)."""
    return {
        "mpjpe_mm": 1000.0 * mpjpe(pred_joints, gt_joints),
        "pmpjpe_mm": 1000.0 * pmpjpe(pred_joints, gt_joints),
        "pve_mm": 1000.0 * pve(pred_verts, gt_verts, pred_joints[PELVIS], gt_joints[PELVIS]),
        "ppve_mm": 1000.0 * ppve(pred_verts, gt_verts),
    }


def evaluate(predictions, gts, mode: str = "", ids=None) -> EvalReport:
    """``predictions`` and ``gts`` are sequences of (vertices, joints3d) pairs."""
    predictions = list(predictions)
    gts = list(gts)
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions for {len(gts)} ground truths")
    ids = list(range(len(gts))) if ids is None else list(ids)
    rows = []
    for i, (p, g) in zip(ids, zip(predictions, gts)):
        row = {"sample": i, "mode": mode}
        row.update(sample_errors(p[0], p[1], g[0], g[1]))
        rows.append(row)
    return EvalReport(rows, mode)
