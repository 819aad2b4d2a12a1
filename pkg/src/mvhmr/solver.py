"""Calibration, staged evidence fusion and Levenberg-Marquardt body fitting.

All model quantities live in the estimated canonical human frame (origin at
the estimated pelvis, axes from the estimated world->human rotation). The
global rotation theta_g is optimised as a small correction on top of that
rotation and is anchored to its previous value like the joint rotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .bodymodel import L_HIP, NECK, PELVIS, R_HIP, BodyParams, BodyTemplate, forward, forward_jacobian, vertex_jacobian
from .camera import CameraRig, Extrinsics, OrthoCam, fit_ortho, world_to_human
from .features import FeatureConfig, blurred_heatmaps, heatmap_peaks, pool, view_features
from .render2d import SIGMA_PX, ViewObservation, joint_heatmaps, rasterize_labels
from .rotation import axis_angle_to_matrix, is_rotation, left_jacobian, skew, wrap_axis_angle
from .volumetric import (
    EPSILON,
    GridSpec,
    VoxelGrid,
    argmax_center,
    balance_weights,
    balanced_fusion,
    consistency_map,
    masked_fusion,
    occupancy_intersection_union,
    pelvis_likelihood,
    unproject,
)

MASKS = ("intersection", "union", "none")
FUSIONS = ("mean", "balanced")
SCHEDULES = {
    "progressive": (("intersection", "mean"), ("union", "mean"), ("none", "balanced")),
    "naive": (("none", "mean"),) * 3,
}
STAGE_TAGS = {"intersection": "Intersection", "union": "Union", "none": "Unmasked", "balanced": "Balanced"}


class DegenerateFrame(ValueError):
    pass


class NonFiniteObjective(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    j3d: float = 1.0
    j2d: float = 0.1
    theta: float = 0.1
    beta: float = 0.1
    rot: float = 0.1
    verts: float = 1.0

    def scaled(self, **kw) -> "LossWeights":
        return replace(self, **kw)


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "progressive"
    schedule: tuple | None = None  # overrides ``mode`` with explicit (mask, fusion) pairs
    grid_g: int = 16
    cube_l: float = 3.0
    calib_g: int = 32
    search_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_iters: int = 200
    grad_tol: float = 1e-6
    ftol: float = 1e-7
    lambda0: float = 1e-2
    epsilon: float = EPSILON
    min_conf: float = 0.3  # targets with weaker fused support are dropped
    weights: LossWeights = field(default_factory=LossWeights)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    refine_translation: bool = True
    acceptance_rule: bool = True

    def __post_init__(self):
        sched = self.stages()
        for m, f in sched:
            if m not in MASKS or f not in FUSIONS:
                raise ValueError(f"invalid stage ({m!r}, {f!r})")
        if self.grid_g < 2 or self.calib_g < 2 or self.cube_l <= 0 or self.max_iters < 0:
            raise ValueError("invalid grid or iteration settings")

    def stages(self) -> tuple:
        if self.schedule is not None:
            return tuple(tuple(s) for s in self.schedule)
        if self.mode not in SCHEDULES:
            raise ValueError(f"unknown mode {self.mode!r}")
        return SCHEDULES[self.mode]


@dataclass(frozen=True, eq=False)
class StageEvidence:
    fused_grid: VoxelGrid
    targets: np.ndarray  # (N_J, 3) in the grid frame
    confidence: np.ndarray  # (N_J,)
    stage_tag: str


@dataclass(eq=False)
class FitResult:
    theta_stages: list[BodyParams]
    world_to_human: Extrinsics
    translation: np.ndarray  # estimated pelvis position in world coordinates
    ortho_cams: list[OrthoCam]
    histories: list[list[float]]
    converged: list[bool]
    stage_objectives: list[float]
    mode: str = "progressive"
    translation_coarse: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def final(self) -> BodyParams:
        return self.theta_stages[-1]

    def predict(self, template: BodyTemplate, stage: int = -1):
        """Vertices and joints in world orientation, pelvis at the origin."""
        body = forward(template, self.theta_stages[stage])
        R = self.world_to_human.rotation
        return body.vertices @ R, body.joints3d @ R

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "theta_stages": [p.to_dict() for p in self.theta_stages],
            "world_to_human": {
                "R": self.world_to_human.rotation.ravel().tolist(),
                "T": self.world_to_human.translation.tolist(),
            },
            "translation": self.translation.tolist(),
            "translation_coarse": None if self.translation_coarse is None else self.translation_coarse.tolist(),
            "ortho_cams": [{"scale": c.scale, "translation": list(c.translation)} for c in self.ortho_cams],
            "histories": self.histories,
            "converged": self.converged,
            "stage_objectives": self.stage_objectives,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        w2h = d["world_to_human"]
        return cls(
            theta_stages=[BodyParams.from_dict(p) for p in d["theta_stages"]],
            world_to_human=Extrinsics(np.array(w2h["R"]).reshape(3, 3), np.array(w2h["T"])),
            translation=np.array(d["translation"]),
            ortho_cams=[OrthoCam(c["scale"], tuple(c["translation"])) for c in d["ortho_cams"]],
            histories=d["histories"],
            converged=d["converged"],
            stage_objectives=d["stage_objectives"],
            mode=d["mode"],
            translation_coarse=None if d.get("translation_coarse") is None else np.array(d["translation_coarse"]),
            notes=d.get("notes", []),
        )


# --------------------------------------------------------------------------- evidence


def estimate_rotation(joints_world, confidence=None, min_conf: float = 0.1) -> np.ndarray:
    """World->human rotation from the hip axis (+x) and the pelvis->neck axis (+y)."""
    j = np.asarray(joints_world, dtype=float)
    if confidence is not None:
        c = np.asarray(confidence)
        if np.any(c[[PELVIS, L_HIP, R_HIP, NECK]] <= min_conf):
            raise DegenerateFrame("pelvis/hip/neck evidence missing")
    up = j[NECK] - j[PELVIS]
    side = j[L_HIP] - j[R_HIP]
    nu, ns = np.linalg.norm(up), np.linalg.norm(side)
    if nu < 1e-9 or ns < 1e-9:
        raise DegenerateFrame("coincident joints")
    y = up / nu
    if abs(np.dot(side / ns, y)) > np.cos(np.deg2rad(5.0)):
        raise DegenerateFrame("hip axis within 5 degrees of the spine axis")
    x = side - np.dot(side, y) * y
    x /= np.linalg.norm(x)
    z = np.cross(x, y)
    B = np.stack([x, y, z], axis=1)  # human axes expressed in world coordinates
    return B.T


def soft_argmax_targets(grid: VoxelGrid, n_joints: int | None = None, rel: float = 0.5):
    """Per-channel centroid of voxels within ``rel`` of the channel max; confidence is the max."""
    C = grid.channels if n_joints is None else n_joints
    centers = grid.spec.centers().reshape(-1, 3)
    data = grid.data.reshape(-1, grid.channels)
    targets = np.full((C, 3), np.nan)
    conf = np.zeros(C)
    for c in range(C):
        v = data[:, c]
        m = v.max()
        if not m > 0:
            continue
        sel = v >= rel * m
        w = v[sel]
        targets[c] = w @ centers[sel] / w.sum()
        conf[c] = min(m, 1.0)
    return targets, conf


# --------------------------------------------------------------------------- objective


@dataclass(eq=False)
class StageProblem:
    """Residual form of one stage: f(x) = |r(x)|^2, x = (theta_j, beta, theta_g)."""

    template: BodyTemplate
    targets: np.ndarray
    confidence: np.ndarray
    view_rotations: np.ndarray  # (N, 3, 3) human->camera rotations
    cams: list[OrthoCam]
    joints2d: np.ndarray  # (N, N_J, 2) observed crop-frame positions
    usable2d: np.ndarray  # (N, N_J) bool
    anchor: BodyParams
    weights: LossWeights = field(default_factory=LossWeights)
    vox: float = 3.0 / 16
    gt_vertices: np.ndarray | None = None

    def __post_init__(self):
        conf = np.where(np.isfinite(self.targets).all(axis=1), self.confidence, 0.0)
        self.confidence = np.clip(conf, 0.0, 1.0)
        self.targets = np.nan_to_num(self.targets)
        self.anchor_R = axis_angle_to_matrix(np.concatenate([self.anchor.theta_g[None], self.anchor.theta_j]))
        self.n_joints = self.template.n_joints
        self.n_shape = self.template.n_shape

    def residuals(self, x, jac: bool = True):
        t = self.template
        K, S = self.n_joints, self.n_shape
        P = len(x)
        params = BodyParams.from_vector(x, K, S)
        w = self.weights
        vox = self.vox
        rs, Js = [], []
        if jac:
            joints, dJ = forward_jacobian(t, params)
        else:
            joints = forward(t, params).joints3d
            dJ = None

        # 3D joints against fused-grid targets
        s3 = np.sqrt(w.j3d * self.confidence)[:, None]
        rs.append((s3 * (joints - self.targets) / vox).ravel())
        if jac:
            Js.append((s3[:, :, None] * dJ / vox).reshape(-1, P))

        # 2D joints through per-view orthographic cameras, converted to metres then voxels
        for n, cam in enumerate(self.cams):
            Rn = self.view_rotations[n]
            s2 = np.sqrt(w.j2d * self.usable2d[n].astype(float))[:, None]
            pc = joints @ Rn.T
            off = (np.asarray(cam.translation) - self.joints2d[n]) / cam.scale
            rs.append((s2 * (pc[:, :2] + off) / vox).ravel())
            if jac:
                d = np.einsum("ij,njp->nip", Rn[:2], dJ)
                Js.append((s2[:, :, None] * d / vox).reshape(-1, P))

        # rotation-matrix priors anchored to the previous estimate (theta_j and theta_g)
        rv = np.concatenate([params.theta_g[None], params.theta_j])
        R = axis_angle_to_matrix(rv)
        diff = R - self.anchor_R
        wts = np.full(K, w.theta)
        wts[0] = w.rot
        sq = np.sqrt(wts)
        rs.append((sq[:, None, None] * diff).ravel())
        if jac:
            Jl = left_jacobian(rv)  # (K, 3, 3)
            # dR/dtheta_a = [Jl e_a]x R
            dR = np.einsum("kabc,kcd->kbda", skew(np.swapaxes(Jl, 1, 2)), R)  # (K, 3, 3, 3)
            block = np.zeros((K, 9, P))
            nj = 3 * (K - 1)
            for k in range(K):
                cols = slice(nj + S, nj + S + 3) if k == 0 else slice(3 * (k - 1), 3 * k)
                block[k, :, cols] = sq[k] * dR[k].reshape(9, 3)
            Js.append(block.reshape(-1, P))

        # shape toward the mean
        rs.append(np.sqrt(w.beta) * params.beta)
        if jac:
            B = np.zeros((S, P))
            B[:, 3 * (K - 1) : 3 * (K - 1) + S] = np.sqrt(w.beta) * np.eye(S)
            Js.append(B)

        # vertices (supervised evaluation only)
        if self.gt_vertices is not None and w.verts > 0:
            sv = np.sqrt(w.verts / t.n_vertices)
            if jac:
                v, dv = vertex_jacobian(t, params)
                Js.append((sv * dv / vox).reshape(-1, P))
            else:
                v = forward(t, params).vertices
            rs.append((sv * (v - self.gt_vertices) / vox).ravel())

        r = np.concatenate(rs)
        return (r, np.concatenate(Js, axis=0)) if jac else (r, None)

    def objective(self, x) -> float:
        r, _ = self.residuals(x, jac=False)
        return float(r @ r)

    def value_and_grad(self, x):
        r, J = self.residuals(x)
        return float(r @ r), 2.0 * J.T @ r


def stage_objective(params: BodyParams, problem: StageProblem):
    """Objective value and analytic gradient at ``params``."""
    return problem.value_and_grad(params.vector())


@dataclass
class StageOutcome:
    params: BodyParams
    history: list[float]
    converged: bool
    iterations: int


def _wrap(x, K):
    nj = 3 * (K - 1)
    x = x.copy()
    x[:nj] = wrap_axis_angle(x[:nj].reshape(-1, 3)).ravel()
    x[-3:] = wrap_axis_angle(x[-3:])
    return x


def run_stage(params_in: BodyParams, problem: StageProblem, max_iters=200, grad_tol=1e-6, ftol=1e-10,
              lambda0=1e-2) -> StageOutcome:  # fmt: skip
    """Levenberg-Marquardt: damping halves after an accepted step and doubles after a rejected one."""
    K = problem.n_joints
    x = params_in.vector()
    r, J = problem.residuals(x)
    f = float(r @ r)
    if not np.isfinite(f):
        raise NonFiniteObjective("objective is not finite at the stage start")
    history = [f]
    lam = lambda0
    converged = False
    it = 0
    eye = np.eye(len(x))
    while it < max_iters:
        g = J.T @ r
        if np.max(np.abs(2.0 * g)) < grad_tol:
            converged = True
            break
        A = J.T @ J
        accepted = False
        while lam < 1e12:
            step = np.linalg.solve(A + lam * eye, -g)
            x_new = _wrap(x + step, K)
            r_new, J_new = problem.residuals(x_new)
            f_new = float(r_new @ r_new)
            if np.isfinite(f_new) and f_new < f:
                accepted = True
                break
            lam *= 2.0
        if not accepted:
            converged = True
            break
        it += 1
        lam = max(lam / 2.0, 1e-12)
        drop = f - f_new
        x, r, J, f = x_new, r_new, J_new, f_new
        history.append(f)
        if drop <= ftol * max(history[-2], 1e-300):
            converged = True
            break
    return StageOutcome(BodyParams.from_vector(x, K, problem.n_shape), history, converged, it)


# --------------------------------------------------------------------------- pipeline


@dataclass(eq=False)
class _Views:
    obs: list[ViewObservation]
    rig: CameraRig
    feats: list[np.ndarray]
    pelvis_maps: list[np.ndarray]
    joints2d: np.ndarray
    usable2d: np.ndarray


def _prepare(observations, rig: CameraRig, cfg: SolverConfig) -> _Views:
    feats, pel = [], []
    for o in observations:
        feats.append(view_features(o, cfg.features))
        pel.append(blurred_heatmaps(o, cfg.features)[PELVIS])
    peaks = [heatmap_peaks(o) for o in observations]
    return _Views(
        list(observations), rig, feats, pel, np.stack([p[0] for p in peaks]), np.stack([p[1] for p in peaks])
    )


def _unproject_all(maps, exts, views: _Views, spec, ds, frame):
    return [
        unproject(m, e, k, spec, o.crop, ds, frame)
        for m, e, k, o in zip(maps, exts, views.rig.intrinsics, views.obs)
    ]


def _weak_perspective(ext: Extrinsics, intr, crop) -> OrthoCam:
    """Orthographic approximation of a calibrated camera about the frame origin, in crop pixels."""
    ci = crop.intrinsics(intr)
    z = ext.translation[2]
    s = ci.focal[0] / z
    t = (ci.focal[0] * ext.translation[0] / z + ci.center[0], ci.focal[1] * ext.translation[1] / z + ci.center[1])
    return OrthoCam(float(s), (float(t[0]), float(t[1])))


def render_model_views(template, params: BodyParams, view_rotations, cams, size, sigma_px=SIGMA_PX):
    """Orthographic silhouettes and joint heatmaps of the current estimate in every view."""
    body = forward(template, params)
    out = []
    for Rn, cam in zip(view_rotations, cams):
        uv = cam.scale * (body.vertices @ Rn.T)[:, :2] + np.asarray(cam.translation)
        mask = (rasterize_labels(uv, template.faces, size) > 0).astype(np.uint8)
        j2 = cam.scale * (body.joints3d @ Rn.T)[:, :2] + np.asarray(cam.translation)
        hm = joint_heatmaps(j2, np.ones(len(j2), bool), size, sigma_px)
        out.append((mask, hm))
    return out


def consistency_weights(template, params, views: _Views, h2c, cams, spec, cfg: SolverConfig):
    rots = np.stack([e.rotation for e in h2c])
    renders = render_model_views(template, params, rots, cams, views.obs[0].size, cfg.features.sigma_px)
    phis = [consistency_map(o.mask, o.heatmaps, m, hm, cfg.epsilon) for o, (m, hm) in zip(views.obs, renders)]
    ds = cfg.features.downsample
    # outside the crop both maps are empty, so the consistency there is 1/epsilon rather than 0
    far = 1.0 / cfg.epsilon
    grids = _unproject_all([pool(p[None] - far, ds) for p in phis], h2c, views, spec, ds, "human")
    grids = [VoxelGrid(g.spec, g.data + far, g.frame) for g in grids]
    return balance_weights(grids)


def build_evidence(views: _Views, feat_grids, occ, mask: str, fusion: str, weights=None) -> StageEvidence:
    m = None if mask == "none" else occ[MASKS.index(mask)]
    if fusion == "balanced":
        fused = balanced_fusion(feat_grids, weights)
        if m is not None:
            fused = VoxelGrid(fused.spec, fused.data * m.data[..., :1], fused.frame)
    else:
        fused = masked_fusion(feat_grids, m)
    n_j = feat_grids[0].channels - 1
    targets, conf = soft_argmax_targets(fused, n_j)
    tag = STAGE_TAGS["balanced"] if fusion == "balanced" else STAGE_TAGS[mask]
    return StageEvidence(fused, targets, conf, tag)


def calibrate(views: _Views, cfg: SolverConfig):
    """Pelvis translation from the summed likelihood, then a geometric world->human rotation."""
    ds = cfg.features.downsample
    rig = views.rig
    crops = [o.crop for o in views.obs]
    spec_w = GridSpec(cfg.calib_g, cfg.cube_l, cfg.search_center)
    like = pelvis_likelihood(views.pelvis_maps, rig.extrinsics, rig.intrinsics, crops, spec_w, ds)
    t_coarse = argmax_center(like)
    spec_c = GridSpec(cfg.grid_g, cfg.cube_l, tuple(t_coarse))
    ungated = [blurred_heatmaps(o, cfg.features) for o in views.obs]
    grids = _unproject_all(ungated, rig.extrinsics, views, spec_c, ds, "world")
    fused = masked_fusion(grids, None)
    targets, conf = soft_argmax_targets(fused)
    t = targets[PELVIS] if (cfg.refine_translation and conf[PELVIS] > 0) else t_coarse
    try:
        R = estimate_rotation(targets, conf)
    except DegenerateFrame:
        R = np.eye(3)
    return t_coarse, t, R


def fit_progressive(
    observations, rig: CameraRig, template: BodyTemplate, config: SolverConfig = SolverConfig(),
    init: BodyParams | None = None, gt_vertices=None,
) -> FitResult:  # fmt: skip
    observations = list(observations)
    if not observations:
        raise ValueError("at least one view required")
    cfg = config
    views = _prepare(observations, rig, cfg)
    t_coarse, t_hat, R_hat = calibrate(views, cfg)
    w2h, h2c = world_to_human(t_hat, R_hat, list(rig.extrinsics))
    if not is_rotation(R_hat, 1e-6):
        raise DegenerateFrame("rotation estimate is not orthonormal")
    spec = GridSpec(cfg.grid_g, cfg.cube_l, (0.0, 0.0, 0.0))
    ds = cfg.features.downsample
    feat_grids = _unproject_all(views.feats, h2c, views, spec, ds, "human")
    stages = cfg.stages()
    occ = None
    if any(m != "none" for m, _ in stages):
        occ_maps = [o.occupancy.astype(float) for o in observations]
        occ = occupancy_intersection_union(_unproject_all(occ_maps, h2c, views, spec, 1, "human"))
    rots = np.stack([e.rotation for e in h2c])
    cams = [_weak_perspective(e, k, o.crop) for e, k, o in zip(h2c, rig.intrinsics, observations)]

    theta0 = init if init is not None else BodyParams.zeros(template.n_joints, template.n_shape)
    thetas = [theta0]
    histories, converged, fvals = [], [], []
    problems = []
    vox = spec.voxel_size
    for k, (mask, fusion) in enumerate(stages):
        prev = thetas[-1]
        weights = None
        if fusion == "balanced":
            if k > 0:
                cams = _refit_cams(template, prev, rots, views, cams)
            weights = consistency_weights(template, prev, views, h2c, cams, spec, cfg)
        ev = build_evidence(views, feat_grids, occ, mask, fusion, weights)
        prob = StageProblem(
            template, ev.targets, np.where(ev.confidence >= cfg.min_conf, ev.confidence, 0.0), rots, cams,
            views.joints2d, views.usable2d, prev, cfg.weights, vox, gt_vertices,
        )  # fmt: skip
        out = run_stage(prev, prob, cfg.max_iters, cfg.grad_tol, cfg.ftol, cfg.lambda0)
        thetas.append(out.params)
        histories.append(out.history)
        converged.append(out.converged)
        fvals.append(out.history[-1])
        problems.append(prob)

    notes = []
    # final-stage acceptance: the last estimate must not be worse than stage 1 on the final objective
    if cfg.acceptance_rule and len(stages) >= 2:
        last = problems[-1]
        f_last = last.objective(thetas[-1].vector())
        f_first = last.objective(thetas[1].vector())
        if f_last > f_first:
            alt = run_stage(thetas[1], last, cfg.max_iters, cfg.grad_tol, cfg.ftol, cfg.lambda0)
            if alt.history[-1] < f_last:
                thetas[-1] = alt.params
                histories[-1] = alt.history
                converged[-1] = alt.converged
                fvals[-1] = alt.history[-1]
                notes.append("final stage restarted from stage-1 estimate")
    return FitResult(
        theta_stages=thetas[1:],
        world_to_human=w2h,
        translation=np.asarray(t_hat),
        ortho_cams=list(cams),
        histories=histories,
        converged=converged,
        stage_objectives=fvals,
        mode=cfg.mode if cfg.schedule is None else "custom",
        translation_coarse=np.asarray(t_coarse),
        notes=notes,
    )


def _refit_cams(template, params, rots, views: _Views, cams):
    joints = forward(template, params).joints3d
    out = []
    for n, Rn in enumerate(rots):
        use = views.usable2d[n]
        try:
            out.append(fit_ortho((joints @ Rn.T)[use], views.joints2d[n][use]) if use.sum() >= 2 else cams[n])
        except ValueError:
            out.append(cams[n])
    return out


def evidence_grids(observations, rig: CameraRig, config: SolverConfig = SolverConfig()) -> dict:
    """Intermediate volumes of one fit for inspection: pelvis likelihood (world) and human-frame fusions."""
    cfg = config
    views = _prepare(list(observations), rig, cfg)
    ds = cfg.features.downsample
    spec_w = GridSpec(cfg.calib_g, cfg.cube_l, cfg.search_center)
    out = {
        "likelihood": pelvis_likelihood(
            views.pelvis_maps, rig.extrinsics, rig.intrinsics, [o.crop for o in views.obs], spec_w, ds
        )
    }
    _, t_hat, R_hat = calibrate(views, cfg)
    _, h2c = world_to_human(t_hat, R_hat, list(rig.extrinsics))
    spec = GridSpec(cfg.grid_g, cfg.cube_l, (0.0, 0.0, 0.0))
    feat_grids = _unproject_all(views.feats, h2c, views, spec, ds, "human")
    occ_maps = [o.occupancy.astype(float) for o in views.obs]
    occ = occupancy_intersection_union(_unproject_all(occ_maps, h2c, views, spec, 1, "human"))
    out["intersection"], out["union"] = occ
    for mask in MASKS:
        out[f"features_{mask}"] = build_evidence(views, feat_grids, occ, mask, "mean").fused_grid
    return out
