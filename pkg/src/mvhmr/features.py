"""Handcrafted per-view feature maps standing in for a learned image encoder.

Channels: N_J blurred joint heatmaps gated by the silhouette, plus the
blurred silhouette itself (C = N_J + 1). Maps are pooled by ``downsample``
so that map pixel q' relates to crop pixel q by q' = (q + 0.5) / ds - 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter

from .render2d import SIGMA_PX, ViewObservation


@dataclass(frozen=True)
class FeatureConfig:
    sigma_feat: float = 20.0  # width of blurred joint evidence, crop pixels
    gate_floor: float = 0.3  # joint evidence kept outside the silhouette
    gate_sigma: float = 4.0  # silhouette softening before gating, crop pixels
    gate_dilate: int = 12  # silhouette dilation radius before gating, crop pixels
    downsample: int = 4
    sigma_px: float = SIGMA_PX  # width of the observed heatmaps

    def __post_init__(self):
        if self.sigma_feat < self.sigma_px:
            raise ValueError("sigma_feat must be at least the heatmap width")
        if not 0.0 <= self.gate_floor <= 1.0:
            raise ValueError("gate_floor must lie in [0, 1]")
        if self.downsample < 1 or self.gate_sigma < 0:
            raise ValueError("invalid downsample / gate_sigma")


def pool(maps: np.ndarray, ds: int) -> np.ndarray:
    """Block mean over ds x ds tiles of (C, H, W) maps (H, W divisible by ds)."""
    if ds == 1:
        return np.asarray(maps, dtype=float)
    C, H, W = maps.shape
    return maps.reshape(C, H // ds, ds, W // ds, ds).mean(axis=(2, 4))


def _blur(maps: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return maps
    return gaussian_filter(maps, sigma=(0, sigma, sigma), mode="constant", truncate=3.0)


def blurred_heatmaps(obs: ViewObservation, cfg: FeatureConfig) -> np.ndarray:
    ds = cfg.downsample
    extra = np.sqrt(cfg.sigma_feat**2 - cfg.sigma_px**2)
    hm = _blur(pool(obs.heatmaps, ds), extra / ds)
    # a unit-peak Gaussian of width s convolved with a normalised one of width b peaks at s^2/(s^2+b^2)
    return np.clip(hm * (cfg.sigma_feat**2 / cfg.sigma_px**2), 0.0, 1.0)


def view_features(obs: ViewObservation, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    ds = cfg.downsample
    hm = blurred_heatmaps(obs, cfg)
    mask = obs.mask.astype(float)
    sil = np.clip(_blur(pool(mask[None], ds), cfg.gate_sigma / ds), 0.0, 1.0)
    if cfg.gate_dilate > 0:
        mask = maximum_filter(mask, size=2 * cfg.gate_dilate + 1, mode="constant")
    gate = np.clip(_blur(pool(mask[None], ds), cfg.gate_sigma / ds), 0.0, 1.0)
    gate = cfg.gate_floor + (1.0 - cfg.gate_floor) * gate
    return np.concatenate([hm * gate, sil], axis=0)


def _log_parabola(lo, c, hi):
    # vertex of the parabola through the log values; exact for a Gaussian profile
    if min(lo, c, hi) <= 0:
        return 0.0
    a, b, d = np.log(lo), np.log(c), np.log(hi)
    den = a - 2 * b + d
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - d) / den, -0.5, 0.5))


def heatmap_peaks(obs: ViewObservation, min_value: float = 0.1):
    """Sub-pixel 2D joint positions from the heatmap maxima, plus usability flags."""
    hm = obs.heatmaps
    J, H, W = hm.shape
    flat = hm.reshape(J, -1)
    idx = flat.argmax(axis=1)
    peak = flat[np.arange(J), idx]
    ys, xs = np.divmod(idx, W)
    out = np.stack([xs, ys], axis=1).astype(float)
    for j in range(J):
        x, y = xs[j], ys[j]
        if 0 < x < W - 1:
            out[j, 0] += _log_parabola(hm[j, y, x - 1], hm[j, y, x], hm[j, y, x + 1])
        if 0 < y < H - 1:
            out[j, 1] += _log_parabola(hm[j, y - 1, x], hm[j, y, x], hm[j, y + 1, x])
    usable = obs.joint_visibility & (peak >= min_value)
    return out, usable
