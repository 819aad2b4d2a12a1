from __future__ import annotations

import dataclasses

import numpy as np
import pytest

import cases
import oracles
from conftest import random_params
from mvhmr.bodymodel import (
    FORMAT_MAGIC,
    N_JOINTS,
    PARENTS,
    PART_NAMES,
    PELVIS,
    BodyParams,
    BodyTemplate,
    InvalidSkeleton,
    TemplateConfig,
    check_tree,
    export_obj,
    forward,
    forward_jacobian,
    make_template,
    n_params,
    shaped_vertices,
    vertex_jacobian,
)
from mvhmr.rotation import axis_angle_to_matrix, matrix_to_axis_angle, random_rotation


def test_template_invariants(template):
    assert template.n_vertices >= 200
    assert template.n_joints == N_JOINTS == 17
    assert template.shape_basis.shape[0] == 10
    assert np.abs(template.joint_regressor.sum(1) - 1).max() <= 1e-9
    assert np.all(template.joint_regressor >= 0)
    assert np.abs(template.skinning_weights.sum(1) - 1).max() <= 1e-9
    assert np.all(template.skinning_weights >= 0)
    assert template.faces.min() >= 0 and template.faces.max() < template.n_vertices
    assert len(np.unique(template.faces)) == template.n_vertices
    check_tree(template.parents)


def test_template_parts_distinguishable(template):
    assert set(np.unique(template.vertex_part)) == set(range(len(PART_NAMES)))


def test_template_deterministic():
    a, b = make_template(TemplateConfig(seed=0)), make_template(TemplateConfig(seed=0))
    for f in ("rest_vertices", "faces", "skinning_weights", "shape_basis", "joint_regressor"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


@pytest.mark.parametrize("parents", [(-1, 0, 1, 5, 3, 2), (-1, -1, 1), (0, 0, 1), (-1, 0, 3, 2)])
def test_non_tree_rejected(parents):
    with pytest.raises(InvalidSkeleton):
        check_tree(parents)


def test_make_template_rejects_bad_config():
    with pytest.raises(InvalidSkeleton):
        make_template(TemplateConfig(parents=(-1,) + PARENTS[1:3] + (5,) + PARENTS[4:]))
    with pytest.raises(ValueError):
        make_template(TemplateConfig(n_shape=5))


def test_rest_pose_identity(template):
    rng = np.random.default_rng(0)
    beta = rng.normal(size=10)
    body = forward(template, BodyParams(np.zeros((16, 3)), beta))
    assert np.allclose(body.vertices, shaped_vertices(template, beta), atol=1e-12)
    assert np.abs(body.joints3d[PELVIS]).max() <= 1e-12


@pytest.mark.parametrize("k", [0, 1, 9])
def test_shape_blendshape_linearity(template, k):
    e = np.zeros(10)
    e[k] = 1.0
    z = BodyParams.zeros()
    d = forward(template, z.replace(beta=e)).vertices - forward(template, z).vertices
    assert np.abs(d - template.shape_basis[k]).max() <= 1e-12


def test_joints_are_regressed_vertices(template):
    body = forward(template, random_params(np.random.default_rng(1)))
    assert np.array_equal(body.joints3d, template.joint_regressor @ body.vertices)


def test_forward_matches_frozen_fk_oracle(template, frozen):
    tj, beta, tg = cases.fk_case()
    body = forward(template, BodyParams(tj, beta, tg))
    assert np.abs(body.joints3d - np.array(frozen["fk_joints"])).max() <= 1e-10
    assert np.abs(body.vertices.sum(0) - np.array(frozen["fk_vertex_sum"])).max() <= 1e-9


def test_forward_matches_live_fk_oracle(template):
    rng = np.random.default_rng(2)
    for _ in range(3):
        p = random_params(rng)
        v, j = oracles.fk_oracle(template, p.theta_j, p.beta, p.theta_g)
        body = forward(template, p)
        assert np.abs(body.vertices - v).max() <= 1e-10
        assert np.abs(body.joints3d - j).max() <= 1e-10


def test_rigid_invariance(template):
    rng = np.random.default_rng(3)
    for _ in range(5):
        p = random_params(rng)
        R = random_rotation(rng)
        g2 = matrix_to_axis_angle(R @ axis_angle_to_matrix(p.theta_g))
        a = forward(template, p).joints3d
        b = forward(template, p.replace(theta_g=g2)).joints3d
        assert np.abs(b - a @ R.T).max() < 1e-9


def test_regressed_pelvis_equals_skeleton_pelvis(template):
    rng = np.random.default_rng(4)
    for _ in range(5):
        beta = rng.normal(size=10)
        skel = oracles.skeleton_joints_oracle(template, beta)
        body = forward(template, BodyParams(np.zeros((16, 3)), beta))
        assert np.linalg.norm(body.joints3d[PELVIS] - skel[PELVIS]) <= 1e-6


def test_global_rotation_generator(template):
    # d(R(theta_g) p)/d theta_g at identity is -[p]x; about z a joint at (1,0,0) moves along (0,1,0)
    _, jac = forward_jacobian(template, BodyParams.zeros())
    joints = forward(template, BodyParams.zeros()).joints3d
    gz = jac[:, :, -1]
    expected = np.stack([-joints[:, 1], joints[:, 0], np.zeros(17)], 1)
    assert np.allclose(gz, expected, atol=1e-12)
    unit = np.array([1.0, 0.0, 0.0])
    assert np.allclose(np.cross([0, 0, 1.0], unit), [0, 1, 0])


def _fd(template, params, h=1e-6):
    x = params.vector()
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        jp = forward(template, BodyParams.from_vector(x + e)).joints3d
        jm = forward(template, BodyParams.from_vector(x - e)).joints3d
        cols.append((jp - jm) / (2 * h))
    return np.stack(cols, -1)


def test_forward_jacobian_finite_difference(template):
    rng = np.random.default_rng(5)
    for _ in range(3):
        p = random_params(rng)
        joints, jac = forward_jacobian(template, p)
        assert np.allclose(joints, forward(template, p).joints3d, atol=1e-12)
        num = _fd(template, p)
        assert np.linalg.norm(jac - num) / np.linalg.norm(num) <= 1e-5


def test_vertex_jacobian_subset(template):
    p = random_params(np.random.default_rng(6))
    idx = np.array([0, 17, 300])
    v, jac = vertex_jacobian(template, p, idx)
    x = p.vector()
    h = 1e-6
    i = 50  # a shape coefficient
    e = np.zeros_like(x)
    e[i] = h
    num = (
        forward(template, BodyParams.from_vector(x + e)).vertices[idx]
        - forward(template, BodyParams.from_vector(x - e)).vertices[idx]
    ) / (2 * h)
    assert jac.shape == (3, 3, n_params(template))
    assert np.allclose(jac[:, :, i], num, atol=1e-7)
    assert np.allclose(v, forward(template, p).vertices[idx])


def test_params_vector_and_dict_round_trip():
    p = random_params(np.random.default_rng(7))
    q = BodyParams.from_vector(p.vector())
    r = BodyParams.from_dict(p.to_dict())
    for a in (q, r):
        assert np.array_equal(a.vector(), p.vector())


def test_template_save_load(tmp_path, template):
    path = tmp_path / "t.npz"
    template.save(path)
    t2 = BodyTemplate.load(path)
    for f in dataclasses.fields(BodyTemplate):
        a, b = getattr(template, f.name), getattr(t2, f.name)
        assert np.array_equal(np.asarray(a), np.asarray(b))
    with np.load(path) as z:
        assert str(z["magic"]) == FORMAT_MAGIC


def test_template_load_rejects_other_files(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, magic=np.array("nope"), version=np.array(1))
    with pytest.raises(ValueError):
        BodyTemplate.load(path)


def test_export_obj(tmp_path, template):
    body = forward(template, BodyParams.zeros())
    path = tmp_path / "m.obj"
    export_obj(path, body.vertices, template.faces)
    lines = path.read_text().splitlines()
    assert sum(ln.startswith("v ") for ln in lines) == template.n_vertices
    assert sum(ln.startswith("f ") for ln in lines) == len(template.faces)
