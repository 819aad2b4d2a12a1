"""Procedural articulated body with an SMPL-shaped parameter interface.

The template is built from surfaces of revolution (torso, head, limbs, hands,
feet) around a 17-joint skeleton whose joint order puts the pelvis at index 0
and keeps the COCO indices for shoulders, elbows, wrists, hips, knees and
ankles (5..16). Pose is axis-angle per non-root joint, shape is a linear
blendshape basis, skinning is linear blend skinning.

Canonical human frame: +y up, +z forward (facing), +x toward the body's left.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotation import axis_angle_to_matrix, left_jacobian, skew

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head", "head_top",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)  # fmt: skip
PARENTS = (-1, 0, 1, 2, 3, 2, 2, 5, 6, 7, 8, 0, 0, 11, 12, 13, 14)
PELVIS, L_HIP, R_HIP, NECK = 0, 11, 12, 2
PART_NAMES = ("head", "torso", "l_arm", "r_arm", "l_leg", "r_leg")
N_JOINTS = 17
N_SHAPE = 10

REST_JOINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.25, 0.0],
        [0.0, 0.50, 0.0],
        [0.0, 0.60, 0.0],
        [0.0, 0.80, 0.0],
        [0.18, 0.45, 0.0],
        [-0.18, 0.45, 0.0],
        [0.45, 0.45, 0.0],
        [-0.45, 0.45, 0.0],
        [0.72, 0.45, 0.0],
        [-0.72, 0.45, 0.0],
        [0.10, -0.05, 0.0],
        [-0.10, -0.05, 0.0],
        [0.10, -0.47, 0.0],
        [-0.10, -0.47, 0.0],
        [0.10, -0.89, 0.0],
        [-0.10, -0.89, 0.0],
    ]
)

FORMAT_MAGIC = "mvhmr-template"
FORMAT_VERSION = 1


class InvalidSkeleton(ValueError):
    pass


@dataclass(frozen=True)
class TemplateConfig:
    seed: int = 0
    n_around_limb: int = 10
    n_around_torso: int = 12
    n_around_head: int = 10
    n_shape: int = N_SHAPE
    n_regressed: int = N_JOINTS
    parents: tuple[int, ...] = PARENTS
    skin_sigma: float = 0.04


@dataclass(frozen=True, eq=False)
class BodyTemplate:
    rest_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    parents: tuple[int, ...]
    skinning_weights: np.ndarray  # (V, K)
    shape_basis: np.ndarray  # (S, V, 3)
    joint_regressor: np.ndarray  # (N_J, V)
    vertex_part: np.ndarray  # (V,) index into PART_NAMES
    joint_names: tuple[str, ...] = JOINT_NAMES

    def __post_init__(self):
        for name in ("rest_vertices", "faces", "skinning_weights", "shape_basis", "joint_regressor", "vertex_part"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        children = [[] for _ in self.parents]
        for k, p in enumerate(self.parents):
            if p >= 0:
                children[p].append(k)
        desc = np.zeros((self.n_joints, self.n_joints), dtype=bool)
        for k in reversed(range(self.n_joints)):
            desc[k, k] = True
            for c in children[k]:
                desc[k] |= desc[c]
        desc.setflags(write=False)
        object.__setattr__(self, "descendants", desc)
        support = np.flatnonzero(np.any(self.joint_regressor != 0, axis=0))
        object.__setattr__(self, "regressor_support", support)

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def face_part(self) -> np.ndarray:
        return self.vertex_part[self.faces[:, 0]]

    def rest_joints(self, beta=None) -> np.ndarray:
        v = self.rest_vertices if beta is None else shaped_vertices(self, beta)
        return self.joint_regressor @ v

    def save(self, path) -> None:
        buf = io.BytesIO()
        np.savez(
            buf,
            magic=np.array(FORMAT_MAGIC),
            version=np.array(FORMAT_VERSION),
            rest_vertices=self.rest_vertices,
            faces=self.faces,
            parents=np.array(self.parents),
            skinning_weights=self.skinning_weights,
            shape_basis=self.shape_basis,
            joint_regressor=self.joint_regressor,
            vertex_part=self.vertex_part,
            joint_names=np.array(self.joint_names),
        )
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "BodyTemplate":
        with np.load(path, allow_pickle=False) as z:
            if str(z["magic"]) != FORMAT_MAGIC:
                raise ValueError(f"{path}: not a body template file")
            if int(z["version"]) != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported template version {int(z['version'])}")
            return cls(
                rest_vertices=z["rest_vertices"],
                faces=z["faces"],
                parents=tuple(z["parents"].tolist()),
                skinning_weights=z["skinning_weights"],
                shape_basis=z["shape_basis"],
                joint_regressor=z["joint_regressor"],
                vertex_part=z["vertex_part"],
                joint_names=tuple(z["joint_names"].tolist()),
            )


@dataclass(frozen=True, eq=False)
class BodyParams:
    theta_j: np.ndarray  # (K-1, 3) axis-angle, joints 1..K-1
    beta: np.ndarray  # (S,)
    theta_g: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("theta_j", "beta", "theta_g"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "theta_j", self.theta_j.reshape(-1, 3))
        object.__setattr__(self, "theta_g", self.theta_g.reshape(3))

    @classmethod
    def zeros(cls, n_joints: int = N_JOINTS, n_shape: int = N_SHAPE) -> "BodyParams":
        return cls(np.zeros((n_joints - 1, 3)), np.zeros(n_shape), np.zeros(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta_j.ravel(), self.beta, self.theta_g])

    @classmethod
    def from_vector(cls, x, n_joints: int = N_JOINTS, n_shape: int = N_SHAPE) -> "BodyParams":
        x = np.asarray(x, dtype=float)
        nj = 3 * (n_joints - 1)
        return cls(x[:nj].reshape(-1, 3), x[nj : nj + n_shape], x[nj + n_shape : nj + n_shape + 3])

    def replace(self, **kw) -> "BodyParams":
        d = dict(theta_j=self.theta_j, beta=self.beta, theta_g=self.theta_g)
        d.update(kw)
        return BodyParams(**d)

    def to_dict(self) -> dict:
        return {"theta_j": self.theta_j.tolist(), "beta": self.beta.tolist(), "theta_g": self.theta_g.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(np.array(d["theta_j"]), np.array(d["beta"]), np.array(d["theta_g"]))


@dataclass(frozen=True, eq=False)
class PosedBody:
    vertices: np.ndarray
    joints3d: np.ndarray


def check_tree(parents) -> None:
    parents = list(parents)
    K = len(parents)
    roots = [k for k, p in enumerate(parents) if p < 0]
    if len(roots) != 1 or roots[0] != 0:
        raise InvalidSkeleton("skeleton needs exactly one root at index 0")
    for k, p in enumerate(parents):
        if p >= K or (p < 0 and k != 0):
            raise InvalidSkeleton(f"joint {k} has invalid parent {p}")
        if k > 0 and p >= k:
            raise InvalidSkeleton("parents must precede children (topological order)")


# --------------------------------------------------------------------------- template


def _frame(u: np.ndarray):
    ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def _tube(a, b, stations, n_around, e1=None, e2=None):
    """Surface of revolution along a->b.

    ``stations`` is a list of (t, r1, r2): axial fraction and the two
    cross-section radii. A station with r1 == r2 == 0 becomes a pole vertex.
    Returns vertices, faces, per-vertex axis points and the ring vertex index
    lists (None for poles).
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    u = (b - a) / np.linalg.norm(b - a)
    if e1 is None:
        e1, e2 = _frame(u)
    ang = 2 * np.pi * np.arange(n_around) / n_around
    verts, axis_pts, rings = [], [], []
    for t, r1, r2 in stations:
        c = a + t * (b - a)
        start = len(verts)
        if r1 == 0 and r2 == 0:
            verts.append(c)
            axis_pts.append(c)
            rings.append([start])
        else:
            for th in ang:
                verts.append(c + r1 * np.cos(th) * e1 + r2 * np.sin(th) * e2)
                axis_pts.append(c)
            rings.append(list(range(start, start + n_around)))
    faces = []
    for ra, rb in zip(rings[:-1], rings[1:]):
        if len(ra) == 1:
            for k in range(n_around):
                faces.append((ra[0], rb[k], rb[(k + 1) % n_around]))
        elif len(rb) == 1:
            for k in range(n_around):
                faces.append((ra[k], rb[0], ra[(k + 1) % n_around]))
        else:
            for k in range(n_around):
                k1 = (k + 1) % n_around
                faces.append((ra[k], rb[k], rb[k1]))
                faces.append((ra[k], rb[k1], ra[k1]))
    return np.array(verts), np.array(faces), np.array(axis_pts), rings


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def make_template(config: TemplateConfig = TemplateConfig()) -> BodyTemplate:
    check_tree(config.parents)
    if tuple(config.parents) != PARENTS:
        raise InvalidSkeleton("procedural mesh layout is defined for the 17-joint skeleton only")
    if config.n_regressed != N_JOINTS or config.n_shape != N_SHAPE:
        raise ValueError("template requires 17 regressed joints and 10 shape coefficients")
    J = REST_JOINTS
    K = len(config.parents)
    nl, nt, nh = config.n_around_limb, config.n_around_torso, config.n_around_head
    pieces = []  # (vertices, faces, axis_pts, rings, part, bones, joint_rings)

    def add(tube, part, bones, joint_rings):
        pieces.append((*tube, part, bones, joint_rings))

    # torso: axis along +y from -0.15 to 0.56; stations by absolute height
    ya, yb = -0.15, 0.56
    torso_st = [(-0.15, 0, 0), (-0.10, 0.13, 0.10), (0.0, 0.16, 0.11), (0.06, 0.16, 0.11), (0.12, 0.15, 0.10),
                (0.19, 0.15, 0.10), (0.25, 0.16, 0.10), (0.32, 0.17, 0.11), (0.38, 0.18, 0.11),
                (0.44, 0.17, 0.10), (0.50, 0.07, 0.06), (0.56, 0, 0)]  # fmt: skip
    ex, ez = np.array([1.0, 0, 0]), np.array([0, 0, 1.0])
    tube = _tube([0, ya, 0], [0, yb, 0], [((y - ya) / (yb - ya), r1, r2) for y, r1, r2 in torso_st], nt, ex, ez)
    top = np.array([0, yb, 0])
    add(tube, 1, [(0, np.array([0, ya, 0]), J[1]), (1, J[1], J[2]), (2, J[2], top)], {0: 2, 1: 6, 2: 10})

    ya, yb = 0.52, 0.86
    head_st = [(0.52, 0, 0), (0.56, 0.05, 0.05), (0.60, 0.07, 0.075), (0.66, 0.09, 0.10), (0.72, 0.095, 0.10),
               (0.80, 0.07, 0.075), (0.86, 0, 0)]  # fmt: skip
    tube = _tube([0, ya, 0], [0, yb, 0], [((y - ya) / (yb - ya), r1, r2) for y, r1, r2 in head_st], nh, ex, ez)
    add(tube, 0, [(2, J[2], J[3]), (3, J[3], np.array([0, yb, 0]))], {3: 2, 4: 5})

    for side, (sh, el, wr, part) in {1: (5, 7, 9, 2), -1: (6, 8, 10, 3)}.items():
        a, b = J[sh], J[wr]
        L = np.linalg.norm(b - a)
        radii = [0.055, 0.05, 0.046, 0.043, 0.04, 0.036, 0.033]
        st = [(-0.05 / L, 0, 0)] + [(i / 6, r, r) for i, r in enumerate(radii)] + [(1 + 0.02 / L, 0, 0)]
        tube = _tube(a, b, st, nl, np.array([0, 1.0, 0]), np.array([0, 0, 1.0]))
        add(tube, part, [(2, J[2], a), (sh, a, J[el]), (el, J[el], b)], {sh: 1, el: 4, wr: 7})
        tip = b + np.array([0.14 * side, 0, 0])
        st = [(0.0, 0, 0), (0.3, 0.02, 0.04), (0.7, 0.02, 0.04), (1.0, 0, 0)]
        tube = _tube(b, tip, st, 6, np.array([0, 0, 1.0]), np.array([0, 1.0, 0]))
        add(tube, part, [(el, J[el], b), (wr, b, tip)], {})

    for hip, knee, ankle, part in ((11, 13, 15, 4), (12, 14, 16, 5)):
        a, b = J[hip], J[ankle]
        L = np.linalg.norm(b - a)
        radii = [0.075, 0.07, 0.062, 0.05, 0.05, 0.045, 0.04]
        st = [(-0.05 / L, 0, 0)] + [(i / 6, r, r) for i, r in enumerate(radii)] + [(1 + 0.03 / L, 0, 0)]
        tube = _tube(a, b, st, nl, np.array([1.0, 0, 0]), np.array([0, 0, 1.0]))
        add(tube, part, [(0, J[0], a), (hip, a, J[knee]), (knee, J[knee], b)], {hip: 1, knee: 4, ankle: 7})
        toe = b + np.array([0.0, -0.04, 0.16])
        st = [(0.0, 0, 0), (0.3, 0.04, 0.03), (0.75, 0.04, 0.02), (1.0, 0, 0)]
        tube = _tube(b, toe, st, 6)
        add(tube, part, [(knee, J[knee], b), (ankle, b, toe)], {})

    verts, faces, axis_pts, vpart = [], [], [], []
    W_rows = []
    regressor = np.zeros((config.n_regressed, 0))
    reg_rows: dict[int, np.ndarray] = {}
    offset = 0
    s2 = 2 * config.skin_sigma**2
    for v, f, ax, rings, part, bones, jrings in pieces:
        n = len(v)
        verts.append(v)
        faces.append(f + offset)
        axis_pts.append(ax)
        vpart.append(np.full(n, part))
        d = np.stack([_segment_distance(v, a, b) for _, a, b in bones], axis=1)
        w = np.exp(-(d**2 - d.min(axis=1, keepdims=True) ** 2) / s2)
        w[w < 1e-3] = 0.0
        w /= w.sum(axis=1, keepdims=True)
        Wp = np.zeros((n, K))
        for col, (k, _, _) in enumerate(bones):
            Wp[:, k] += w[:, col]
        W_rows.append(Wp)
        for j, ring_id in jrings.items():
            reg_rows[j] = np.array(rings[ring_id]) + offset
        offset += n
    V = np.concatenate(verts)
    F = np.concatenate(faces)
    W = np.concatenate(W_rows)
    axis_pts = np.concatenate(axis_pts)
    vpart = np.concatenate(vpart)
    regressor = np.zeros((config.n_regressed, len(V)))
    for j in range(config.n_regressed):
        idx = reg_rows[j]
        regressor[j, idx] = 1.0 / len(idx)

    basis = _shape_basis(V, axis_pts, config.seed, regressor)
    return BodyTemplate(
        rest_vertices=V,
        faces=F.astype(np.int64),
        parents=tuple(config.parents),
        skinning_weights=W,
        shape_basis=basis,
        joint_regressor=regressor,
        vertex_part=vpart.astype(np.int64),
    )


def _shape_basis(V, axis_pts, seed, regressor):
    x, y, z = V.T
    sx = np.sign(x)
    S = np.zeros((N_SHAPE, len(V), 3))
    S[0] = 0.03 * V
    radial = V - axis_pts
    rn = np.linalg.norm(radial, axis=1, keepdims=True)
    S[1] = 0.012 * np.divide(radial, rn, out=np.zeros_like(radial), where=rn > 1e-9)
    S[2, :, 1] = 0.04 * np.minimum(y + 0.05, 0.0) / 0.84
    S[3, :, 0] = 0.04 * sx * np.clip(np.abs(x) - 0.18, 0.0, None) / 0.54
    S[4, :, 1] = 0.03 * np.clip(y, 0.0, 0.5) / 0.5
    S[5, :, 0] = 0.02 * sx * np.clip((np.abs(x) - 0.05) / 0.13, 0, 1) * np.clip((y - 0.3) / 0.1, 0, 1)
    S[6, :, 0] = 0.015 * sx * np.clip(np.abs(x) / 0.1, 0, 1) * np.clip((0.1 - y) / 0.1, 0, 1)
    rng = np.random.default_rng(seed)
    feats = np.stack([x, y, z, x * x, y * y, z * z, x * y, y * z, z * x], axis=1)
    for s in range(7, N_SHAPE):
        A = rng.normal(size=(9, 3))
        field_ = feats @ A
        S[s] = 0.01 * field_ / np.abs(field_).max()
    # keep the pelvis fixed under every shape direction
    S -= (regressor[PELVIS] @ S)[:, None, :]
    return S


# --------------------------------------------------------------------------- kinematics


def shaped_vertices(template: BodyTemplate, beta) -> np.ndarray:
    return template.rest_vertices + np.tensordot(np.asarray(beta, float), template.shape_basis, axes=1)


def _chain(template: BodyTemplate, params: BodyParams):
    """Global joint rotations/positions and the shaped rest geometry."""
    v_shaped = shaped_vertices(template, params.beta)
    J = template.joint_regressor @ v_shaped
    rotvecs = np.concatenate([params.theta_g[None], params.theta_j], axis=0)
    local = axis_angle_to_matrix(rotvecs)
    K = template.n_joints
    Rg = np.empty((K, 3, 3))
    pg = np.empty((K, 3))
    for k, p in enumerate(template.parents):
        if p < 0:
            Rg[k] = local[k]
            pg[k] = J[k]
        else:
            Rg[k] = Rg[p] @ local[k]
            pg[k] = pg[p] + Rg[p] @ (J[k] - J[p])
    return v_shaped, J, rotvecs, Rg, pg


def _skin(W, Rg, pg, J, v):
    M = np.einsum("vk,kij->vij", W, Rg)
    t = W @ (pg - np.einsum("kij,kj->ki", Rg, J))
    return np.einsum("vij,vj->vi", M, v) + t


def forward(template: BodyTemplate, params: BodyParams) -> PosedBody:
    """Shape, pose and skin the template; results are pelvis-centred in the human frame."""
    v_shaped, J, _, Rg, pg = _chain(template, params)
    verts = _skin(template.skinning_weights, Rg, pg, J, v_shaped)
    return PosedBody(vertices=verts, joints3d=template.joint_regressor @ verts)


def vertex_jacobian(template: BodyTemplate, params: BodyParams, idx=None):
    """Posed vertices ``idx`` and their Jacobian (n, 3, P) w.r.t. (theta_j, beta, theta_g)."""
    v_shaped, J, rotvecs, Rg, pg = _chain(template, params)
    if idx is None:
        idx = np.arange(template.n_vertices)
    W = template.skinning_weights[idx]
    vs = v_shaped[idx]
    K = template.n_joints
    S = template.n_shape
    # position of each vertex if rigidly attached to bone k
    terms = np.einsum("kij,vkj->vki", Rg, vs[:, None, :] - J[None]) + pg[None]
    verts = np.einsum("vk,vki->vi", W, terms)

    # rotation part: joint m moves every bone in its subtree about pg[m]
    desc = template.descendants.astype(float)  # (m, k)
    WD = W[:, None, :] * desc[None]  # (v, m, k)
    s = np.einsum("vmk,vki->vmi", WD, terms) - WD.sum(-1)[..., None] * pg[None]
    parent_R = np.stack([np.eye(3) if p < 0 else Rg[p] for p in template.parents])
    Omega = parent_R @ left_jacobian(rotvecs)  # (m, 3, 3)
    d_rot = -np.einsum("vmij,mjk->vmik", skew(s), Omega)  # (v, m, 3, 3)

    # shape part
    B = template.shape_basis[:, idx, :]  # (S, v, 3)
    dJ = np.einsum("jv,svc->sjc", template.joint_regressor, template.shape_basis)  # (S, K, 3)
    dpg = np.empty((S, K, 3))
    for k, p in enumerate(template.parents):
        if p < 0:
            dpg[:, k] = dJ[:, k]
        else:
            dpg[:, k] = dpg[:, p] + np.einsum("ij,sj->si", Rg[p], dJ[:, k] - dJ[:, p])
    M = np.einsum("vk,kij->vij", W, Rg)
    d_beta = np.einsum("vij,svj->vis", M, B)
    d_beta += np.einsum("vk,ski->vis", W, dpg - np.einsum("kij,skj->ski", Rg, dJ))

    n = len(idx)
    P = 3 * (K - 1) + S + 3
    jac = np.empty((n, 3, P))
    jac[:, :, : 3 * (K - 1)] = d_rot[:, 1:].transpose(0, 2, 1, 3).reshape(n, 3, 3 * (K - 1))
    jac[:, :, 3 * (K - 1) : 3 * (K - 1) + S] = d_beta
    jac[:, :, 3 * (K - 1) + S :] = d_rot[:, 0]
    return verts, jac


def forward_jacobian(template: BodyTemplate, params: BodyParams):
    """Regressed joints (N_J, 3) and d joints / d (theta_j, beta, theta_g) as (N_J, 3, P)."""
    sup = template.regressor_support
    verts, jac = vertex_jacobian(template, params, sup)
    R = template.joint_regressor[:, sup]
    return R @ verts, np.einsum("jv,vcp->jcp", R, jac)


def n_params(template: BodyTemplate) -> int:
    return 3 * (template.n_joints - 1) + template.n_shape + 3


def export_obj(path, vertices, faces) -> None:
    lines = ["# mvhmr posed mesh"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")
