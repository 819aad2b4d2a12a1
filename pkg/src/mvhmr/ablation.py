"""Perturbation sweeps comparing solver schedules on identical corrupted inputs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from .bodymodel import BodyTemplate
from .metrics import sample_errors
from .solver import SCHEDULES, SolverConfig, fit_progressive
from .synth import SynthConfig, TrainingSample, augment, sample_rng

METRICS = ("mpjpe_mm", "pmpjpe_mm", "pve_mm", "ppve_mm")
LONG_COLUMNS = ("target", "prob", "variant", "metric", "value")
AUG_STREAM = 1


def perturbation_config(base: SynthConfig, target: str, prob: float) -> SynthConfig:
    if target == "mask":
        return base.mask_perturbation(prob)
    if target == "joints":
        return base.joint_perturbation(prob)
    raise ValueError(f"unknown perturbation target {target!r}")


def variant_config(solver: SolverConfig, schedule) -> SolverConfig:
    schedule = tuple(tuple(s) for s in schedule)
    for name, sched in SCHEDULES.items():
        if sched == schedule:
            return replace(solver, mode=name, schedule=None)
    return replace(solver, schedule=schedule)


@dataclass
class SweepResult:
    target: str
    probs: tuple[float, ...]
    variants: tuple[str, ...]
    # errors[variant][metric] -> (n_probs, n_samples) array
    errors: dict = field(default_factory=dict)
    sample_ids: tuple[int, ...] = ()

    def mean(self, variant: str, metric: str = "pmpjpe_mm") -> np.ndarray:
        return self.errors[variant][metric].mean(axis=1)

    def spearman(self, variant: str, metric: str = "pmpjpe_mm") -> float:
        m = self.mean(variant, metric)
        if len(m) < 2 or np.all(m == m[0]):
            return float("nan")
        return float(spearmanr(self.probs, m).statistic)

    def wins(self, a: str = "progressive", b: str = "naive", metric: str = "pmpjpe_mm") -> np.ndarray:
        """Per-trial wins of ``a`` over ``b`` (ties count as wins), shape (n_probs, n_samples)."""
        return self.errors[a][metric] <= self.errors[b][metric]

    def points_won(self, a: str = "progressive", b: str = "naive", metric: str = "pmpjpe_mm") -> np.ndarray:
        return self.mean(a, metric) <= self.mean(b, metric)

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LONG_COLUMNS)
        for v in self.variants:
            for metric in METRICS:
                for p, val in zip(self.probs, self.mean(v, metric)):
                    w.writerow([self.target, f"{p:g}", v, metric, f"{val:.6f}"])
        return buf.getvalue()

    def trials_csv(self, a: str = "progressive", b: str = "naive") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        have = a in self.errors and b in self.errors
        w.writerow(["target", "prob", "sample"] + [f"{v}_pmpjpe_mm" for v in self.variants] + (["win"] if have else []))
        for i, p in enumerate(self.probs):
            for k, sid in enumerate(self.sample_ids):
                row = [self.target, f"{p:g}", sid]
                row += [f"{self.errors[v]['pmpjpe_mm'][i, k]:.6f}" for v in self.variants]
                if have:
                    row.append(int(self.wins(a, b)[i, k]))
                w.writerow(row)
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"target": self.target, "probs": list(self.probs), "n_samples": len(self.sample_ids), "variants": {}}
        for v in self.variants:
            out["variants"][v] = {
                "mean_pmpjpe_mm": self.mean(v).tolist(),
                "spearman_pmpjpe": self.spearman(v),
            }
        if "progressive" in self.errors and "naive" in self.errors:
            won = self.points_won()
            out["progressive_vs_naive"] = {
                "points_won": int(won.sum()),
                "points": len(won),
                "trial_win_rate": self.wins().mean(axis=1).tolist(),
            }
        return out


def run_sweep(
    samples: list[TrainingSample], template: BodyTemplate, base: SynthConfig, solver: SolverConfig,
    variants: dict, target: str, probs, seed: int, progress=None,
) -> SweepResult:  # fmt: skip
    """Fit every variant on every sample corrupted at every probability.

    The corruption of sample i always uses generator (seed, i, AUG_STREAM), so the
    random draws are shared across probabilities and variants see identical inputs.
    """
    probs = tuple(float(p) for p in probs)
    names = tuple(variants)
    errs = {v: {m: np.zeros((len(probs), len(samples))) for m in METRICS} for v in names}
    configs = {v: variant_config(solver, s) for v, s in variants.items()}
    for i, p in enumerate(probs):
        aug = perturbation_config(base, target, p)
        for k, s in enumerate(samples):
            obs = augment(s, aug, sample_rng(seed, s.index, AUG_STREAM)).observations
            for v in names:
                res = fit_progressive(obs, s.rig, template, configs[v])
                pv, pj = res.predict(template)
                e = sample_errors(pv, pj, s.gt_vertices, s.gt_joints3d)
                for m in METRICS:
                    errs[v][m][i, k] = e[m]
            if progress is not None:
                progress(p, s.index)
    return SweepResult(target, probs, names, errs, tuple(s.index for s in samples))
