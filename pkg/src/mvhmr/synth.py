"""Multi-view synthetic data: parameter and rig sampling, rendering, augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .bodymodel import N_JOINTS, BodyParams, BodyTemplate, forward
from .camera import CameraRig, Extrinsics, Intrinsics, compose_rig, human_to_cam, look_at, project_persp
from .render2d import (
    SIGMA_PX,
    TAU_HEAT,
    EmptySilhouette,
    ViewObservation,
    crop_and_resize,
    rasterize_parts,
)
from .rotation import axis_angle_to_matrix, matrix_to_axis_angle

DROPPABLE = (7, 8, 9, 10, 13, 14, 15, 16)

# (lo, hi) per joint 1..16 and axis (x: left, y: up, z: forward)
JOINT_LIMITS = np.array(
    [
        [[-0.3, 0.6], [-0.5, 0.5], [-0.3, 0.3]],  # spine
        [[-0.2, 0.3], [-0.4, 0.4], [-0.2, 0.2]],  # neck
        [[-0.3, 0.3], [-0.3, 0.3], [-0.3, 0.3]],  # head
        [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],  # head_top
        [[-0.5, 0.5], [-1.2, 0.5], [-1.3, 0.3]],  # l_shoulder
        [[-0.5, 0.5], [-0.5, 1.2], [-0.3, 1.3]],  # r_shoulder
        [[-0.3, 0.3], [-2.0, 0.0], [-0.1, 0.1]],  # l_elbow
        [[-0.3, 0.3], [0.0, 2.0], [-0.1, 0.1]],  # r_elbow
        [[-0.3, 0.3], [-0.3, 0.3], [-0.3, 0.3]],  # l_wrist
        [[-0.3, 0.3], [-0.3, 0.3], [-0.3, 0.3]],  # r_wrist
        [[-1.5, 0.4], [-0.5, 0.5], [-0.2, 0.6]],  # l_hip
        [[-1.5, 0.4], [-0.5, 0.5], [-0.6, 0.2]],  # r_hip
        [[0.0, 2.0], [-0.1, 0.1], [-0.1, 0.1]],  # l_knee
        [[0.0, 2.0], [-0.1, 0.1], [-0.1, 0.1]],  # r_knee
        [[-0.3, 0.3], [-0.3, 0.3], [-0.3, 0.3]],  # l_ankle
        [[-0.3, 0.3], [-0.3, 0.3], [-0.3, 0.3]],  # r_ankle
    ]
)

RIG_TEMPLATES = ("ring", "hemisphere")


@dataclass(frozen=True)
class SynthConfig:
    shape_mu: tuple[float, ...] = (0.0,) * 10
    shape_sigma2: tuple[float, ...] = (1.25,) * 10
    cam_trans_mu: tuple[float, float, float] = (0.0, 0.0, 42.0)
    cam_trans_sigma2: tuple[float, float, float] = (0.05, 0.05, 5.0)
    focal: tuple[float, float] = (5000.0, 5000.0)
    principal: tuple[float, float] = (512.0, 512.0)
    render_size: tuple[int, int] = (1024, 1024)
    target_size: int = 256
    n_views: int = 4
    rig_template: str = "ring"
    rig_elevation_deg: float = 10.0
    rig_jitter_deg: float = 0.0
    world_offset_sigma: float = 0.2
    yaw_range: tuple[float, float] = (-np.pi, np.pi)
    tilt_sigma: float = 0.1
    vertex_perturb_sigma2: tuple[float, float, float] = (0.01, 0.01, 0.0)
    part_occlusion_probs: tuple[float, ...] = (0.1,) * 6
    box_occlusion_prob: float = 0.1
    box_size: tuple[int, int] = (48, 48)
    joint_perturb_sigma2: float = 8.0
    drop_indices: tuple[int, ...] = DROPPABLE
    drop_prob: float = 0.05
    bbox_scale_range: tuple[float, float] = (1.0, 1.2)
    sigma_px: float = SIGMA_PX
    tau_heat: float = TAU_HEAT
    seed: int = 0

    def __post_init__(self):
        for name in ("shape_mu", "shape_sigma2", "part_occlusion_probs", "drop_indices", "box_size"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("cam_trans_mu", "cam_trans_sigma2", "focal", "principal", "render_size", "yaw_range",
                     "vertex_perturb_sigma2", "bbox_scale_range"):  # fmt: skip
            object.__setattr__(self, name, tuple(getattr(self, name)))
        probs = list(self.part_occlusion_probs) + [self.box_occlusion_prob, self.drop_prob]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if len(self.part_occlusion_probs) != 6:
            raise ValueError("part_occlusion_probs needs one entry per body part (6)")
        if len(self.shape_mu) != 10 or len(self.shape_sigma2) != 10:
            raise ValueError("shape prior needs 10 coefficients")
        if not 1 <= self.n_views <= 8:
            raise ValueError("n_views must lie in 1..8")
        if self.rig_template not in RIG_TEMPLATES:
            raise ValueError(f"unknown rig template {self.rig_template!r}")
        if min(self.render_size) <= 0 or self.target_size <= 0 or min(self.box_size) <= 0:
            raise ValueError("sizes must be positive")
        if min(self.focal) <= 0:
            raise ValueError("focal must be positive")
        lo, hi = self.bbox_scale_range
        if not 1.0 <= lo <= hi <= 1.2:
            raise ValueError("bbox_scale_range must lie inside [1.0, 1.2]")
        if min(self.shape_sigma2) < 0 or min(self.cam_trans_sigma2) < 0 or min(self.vertex_perturb_sigma2) < 0:
            raise ValueError("variances must be non-negative")
        if any(not 0 <= i < N_JOINTS for i in self.drop_indices):
            raise ValueError("drop index out of range")

    def clean(self) -> "SynthConfig":
        """Same generator with every augmentation and the vertex perturbation switched off."""
        return replace(self, vertex_perturb_sigma2=(0.0, 0.0, 0.0)).without_augmentation()

    def without_augmentation(self) -> "SynthConfig":
        return replace(
            self, part_occlusion_probs=(0.0,) * 6, box_occlusion_prob=0.0, joint_perturb_sigma2=0.0, drop_prob=0.0
        )

    def mask_perturbation(self, prob: float) -> "SynthConfig":
        """Silhouette-only corruption at probability ``prob`` (part erasure and box)."""
        return replace(self.without_augmentation(), part_occlusion_probs=(prob,) * 6, box_occlusion_prob=prob)

    def joint_perturbation(self, prob: float) -> "SynthConfig":
        """2D-joint-only corruption: every droppable joint dropped with ``prob``."""
        return replace(self.without_augmentation(), drop_prob=prob)

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.floating):
        return float(v)
    return v


@dataclass(frozen=True, eq=False)
class TrainingSample:
    observations: tuple[ViewObservation, ...]
    gt_params: BodyParams
    gt_vertices: np.ndarray  # (V, 3) world orientation, pelvis at origin
    gt_joints3d: np.ndarray  # (N_J, 3) same frame
    pelvis_world: np.ndarray  # (3,) pelvis position in world coordinates
    rig: CameraRig
    index: int = 0
    meta: dict = field(default_factory=dict)

    def replace_observations(self, obs) -> "TrainingSample":
        return replace(self, observations=tuple(obs))

    def vertices_world(self) -> np.ndarray:
        return self.gt_vertices + self.pelvis_world

    def joints_world(self) -> np.ndarray:
        return self.gt_joints3d + self.pelvis_world

    def joints_in_view(self, n: int) -> np.ndarray:
        return self.rig.extrinsics[n].apply(self.joints_world())

    def vertices_in_view(self, n: int) -> np.ndarray:
        return self.rig.extrinsics[n].apply(self.vertices_world())


# --------------------------------------------------------------------------- sampling


def _euler_yxz(yaw, pitch, roll) -> np.ndarray:
    Ry = axis_angle_to_matrix(np.array([0.0, yaw, 0.0]))
    Rx = axis_angle_to_matrix(np.array([pitch, 0.0, 0.0]))
    Rz = axis_angle_to_matrix(np.array([0.0, 0.0, roll]))
    return Ry @ Rx @ Rz


def sample_params(rng: np.random.Generator, config: SynthConfig = SynthConfig(), pose_bank=None) -> BodyParams:
    beta = np.asarray(config.shape_mu) + np.sqrt(np.asarray(config.shape_sigma2)) * rng.normal(size=10)
    u = rng.random(JOINT_LIMITS.shape[:2])
    theta_j = JOINT_LIMITS[..., 0] + u * (JOINT_LIMITS[..., 1] - JOINT_LIMITS[..., 0])
    if pose_bank is not None and len(pose_bank):
        theta_j = np.asarray(pose_bank[int(rng.integers(len(pose_bank)))], dtype=float).reshape(-1, 3)
    yaw = rng.uniform(*config.yaw_range)
    pitch, roll = np.clip(rng.normal(0.0, config.tilt_sigma, 2), -3 * config.tilt_sigma, 3 * config.tilt_sigma)
    theta_g = matrix_to_axis_angle(_euler_yxz(yaw, pitch, roll))
    return BodyParams(theta_j, beta, theta_g)


def rig_template(name: str, n_views: int, distance: float = 42.0, elevation_deg: float = 10.0) -> list[Extrinsics]:
    """World->camera rotations/translations of a camera layout looking at the origin."""
    if name == "ring":
        az = 2 * np.pi * np.arange(n_views) / n_views
        el = np.full(n_views, np.deg2rad(elevation_deg))
    elif name == "hemisphere":
        if n_views > 8:
            raise ValueError("hemisphere template holds 8 cameras")
        golden = np.pi * (3 - np.sqrt(5))
        az = (golden * np.arange(8))[:n_views]
        el = np.deg2rad(np.linspace(5.0, 50.0, 8))[[0, 4, 2, 6, 1, 5, 3, 7]][:n_views]
    else:
        raise ValueError(f"unknown rig template {name!r}")
    out = []
    for a, e in zip(az, el):
        pos = distance * np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
        out.append(look_at(pos))
    return out


def sample_rig(rng: np.random.Generator, config: SynthConfig = SynthConfig(), n_views: int | None = None) -> CameraRig:
    """Rig in a pelvis-centred world: camera 1 from the translation prior, others via the rig composition."""
    n = config.n_views if n_views is None else n_views
    mu = np.asarray(config.cam_trans_mu, dtype=float)
    sd = np.sqrt(np.asarray(config.cam_trans_sigma2, dtype=float))
    base = rig_template(config.rig_template, n, float(mu[2]), config.rig_elevation_deg)
    jit = np.deg2rad(config.rig_jitter_deg) * rng.normal(size=(n, 3))
    base = [Extrinsics(axis_angle_to_matrix(w) @ e.rotation, e.translation) for w, e in zip(jit, base)]
    rel = compose_rig(base)
    eps = sd * rng.normal(size=(n, 3))
    h2c1 = Extrinsics(base[0].rotation, mu + eps[0])
    exts = [h2c1]
    for k in range(1, n):
        via = human_to_cam(rel[k], Extrinsics(base[0].rotation, mu))
        exts.append(Extrinsics(via.rotation, via.translation + eps[k]))
    intr = Intrinsics(tuple(config.focal), tuple(config.principal), tuple(config.render_size))
    return CameraRig((intr,) * n, tuple(exts))


def _render_views(template, verts_w, joints_w, rig, config, rng):
    obs = []
    face_part = template.face_part
    lo, hi = config.bbox_scale_range
    for ext, intr in zip(rig.extrinsics, rig.intrinsics):
        parts = rasterize_parts(verts_w, template.faces, ext, intr, config.render_size, face_part)
        j2d = project_persp(joints_w, ext, intr)
        H, W = config.render_size
        vis = (j2d[:, 0] >= -0.5) & (j2d[:, 0] <= W - 0.5) & (j2d[:, 1] >= -0.5) & (j2d[:, 1] <= H - 0.5)
        o = crop_and_resize(parts, j2d, vis, rng.uniform(lo, hi), config.target_size, config.sigma_px)
        obs.append(o)
    return tuple(obs)


def generate_sample(config: SynthConfig, template: BodyTemplate, rng: np.random.Generator, index: int = 0,
                    pose_bank=None) -> TrainingSample:  # fmt: skip
    params = sample_params(rng, config, pose_bank)
    body = forward(template, params)
    noise = np.sqrt(np.asarray(config.vertex_perturb_sigma2)) * rng.normal(size=body.vertices.shape)
    for attempt in range(2):
        rig_h = sample_rig(rng, config)
        pelvis_w = config.world_offset_sigma * rng.normal(size=3)
        rig = rig_h.translated(pelvis_w)
        try:
            obs = _render_views(template, body.vertices + noise + pelvis_w, body.joints3d + pelvis_w, rig, config, rng)
            break
        except EmptySilhouette:
            if attempt == 1:
                raise
    return TrainingSample(obs, params, body.vertices, body.joints3d, pelvis_w, rig, index)


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (seed, sample index, stream)."""
    return np.random.default_rng([int(seed), int(index), int(stream)])


def generate(config: SynthConfig, template: BodyTemplate, n: int, start: int = 0, pose_bank=None):
    for i in range(start, start + n):
        yield generate_sample(config, template, sample_rng(config.seed, i), i, pose_bank)


# --------------------------------------------------------------------------- augmentation


def _augment_view(o: ViewObservation, config: SynthConfig, rng: np.random.Generator) -> ViewObservation:
    # fixed draw order regardless of probabilities so corruption is nested in the probabilities
    u_parts = rng.random(6)
    u_box = rng.random()
    u_box_pos = rng.random(2)
    jitter = rng.normal(size=o.joints2d.shape)
    u_drop = rng.random(len(o.joints2d))

    parts = o.parts.copy() if o.parts is not None else o.mask.copy()
    for k in range(6):
        if u_parts[k] < config.part_occlusion_probs[k]:
            parts &= np.uint8(~(1 << k) & 0xFF)
    mask = (parts > 0).astype(np.uint8)
    if u_box < config.box_occlusion_prob and o.mask.any():
        ys, xs = np.nonzero(o.mask)
        cx = xs.min() + u_box_pos[0] * (xs.max() - xs.min())
        cy = ys.min() + u_box_pos[1] * (ys.max() - ys.min())
        bw, bh = config.box_size
        x0, y0 = int(round(cx - bw / 2)), int(round(cy - bh / 2))
        sl = (slice(max(y0, 0), max(y0 + bh, 0)), slice(max(x0, 0), max(x0 + bw, 0)))
        mask[sl] = 0
        parts[sl] = 0
    j2d = o.joints2d + np.sqrt(config.joint_perturb_sigma2) * jitter
    vis = o.joint_visibility.copy()
    for i in config.drop_indices:
        if u_drop[i] < config.drop_prob:
            vis[i] = False
    return ViewObservation.build(j2d, vis, mask, o.crop, parts, config.sigma_px, config.tau_heat)


def augment(sample: TrainingSample, config: SynthConfig, rng: np.random.Generator) -> TrainingSample:
    """Independent per-view corruption of the 2D representations; GT and rig untouched."""
    return sample.replace_observations(_augment_view(o, config, rng) for o in sample.observations)
