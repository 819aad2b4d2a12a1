from __future__ import annotations

import numpy as np
import pytest

import cases
import oracles
from mvhmr.camera import Extrinsics, Intrinsics, look_at
from mvhmr.render2d import CropInfo, joint_heatmaps
from mvhmr.volumetric import (
    AllZeroLikelihood,
    GridSpec,
    SpecMismatch,
    VoxelGrid,
    argmax_center,
    balance_weights,
    balanced_fusion,
    bilinear_sample,
    consistency_map,
    estimate_translation,
    load_grid,
    masked_fusion,
    mean_fusion,
    occupancy_intersection_union,
    save_grid,
    unproject,
    voxel_pixels,
)


def case_camera():
    R, T, K, size = cases.camera_case()
    return Extrinsics(R, T), Intrinsics((K[0, 0], K[1, 1]), (K[0, 2], K[1, 2]), size)


def grids(arrs, spec=None):
    spec = spec or GridSpec(arrs[0].shape[0], 3.0)
    return [VoxelGrid(spec, a) for a in arrs]


def test_gridspec_centers_and_validation():
    s = GridSpec(4, 2.0, (1.0, 0.0, -1.0))
    c = s.centers()
    assert c.shape == (4, 4, 4, 3)
    assert np.allclose(c[0, 0, 0], [1 - 0.75, -0.75, -1 - 0.75])
    assert np.allclose(c[3, 1, 2], [1 + 0.75, -0.25, -1 + 0.25])
    with pytest.raises(ValueError):
        GridSpec(1, 1.0)
    with pytest.raises(ValueError):
        GridSpec(4, 0.0)


def test_bilinear_exact_and_interpolated():
    m = np.arange(12, dtype=float).reshape(1, 3, 4)
    pts = np.array([[1.0, 1.0], [1.5, 0.0], [3.0, 2.0], [3.01, 0.0], [np.nan, 0.0]])
    out = bilinear_sample(m, pts)[0]
    assert out[0] == 5.0 and out[1] == 1.5 and out[2] == 11.0 and out[3] == 0.0 and out[4] == 0.0


def test_bilinear_matches_oracle():
    rng = np.random.default_rng(0)
    m = rng.random((2, 9, 7))
    pts = rng.uniform(-1, 10, size=(300, 2))
    out = bilinear_sample(m, pts)
    ref = np.array([[oracles.bilinear_oracle(m[c], x, y) for x, y in pts] for c in range(2)])
    assert np.abs(out - ref).max() <= 1e-12


def test_unproject_constant_map():
    ext, intr = case_camera()
    spec = GridSpec(6, 5.0)
    g = unproject(np.full((1, 32, 32), 0.7), ext, intr, spec)
    uv = voxel_pixels(spec, ext, intr).reshape(6, 6, 6, 2)
    inside = (uv[..., 0] >= 0) & (uv[..., 0] <= 31) & (uv[..., 1] >= 0) & (uv[..., 1] <= 31)
    assert inside.any() and (~inside).any()
    assert np.allclose(g.data[..., 0][inside], 0.7, atol=1e-14)
    assert np.all(g.data[..., 0][~inside] == 0)


def test_unproject_exact_pixel_centre():
    intr = Intrinsics((10.0, 10.0), (8.0, 8.0), (16, 16))
    ext = Extrinsics(np.eye(3), np.array([0.0, 0.0, 5.0]))
    spec = GridSpec(2, 2.0, (0.5, 0.5, 0.5))  # voxel (0,0,0) sits on the optical axis
    m = np.random.default_rng(1).random((1, 16, 16))
    g = unproject(m, ext, intr, spec)
    assert g.data[0, 0, 0, 0] == m[0, 8, 8]


def test_unproject_matches_frozen_oracle(frozen):
    maps, R, T, K, kw = cases.unproject_case()
    ext, intr = case_camera()
    g = unproject(maps, ext, intr, GridSpec(kw["G"], kw["L"], kw["center"]),
                  CropInfo(kw["crop_scale"], kw["crop_offset"], (32, 32)), kw["ds"])  # fmt: skip
    assert np.abs(g.data - np.array(frozen["unproject"])).max() <= 1e-12


def test_unproject_behind_camera_zero():
    intr = Intrinsics((10.0, 10.0), (8.0, 8.0), (16, 16))
    ext = Extrinsics(np.eye(3), np.array([0.0, 0.0, 0.5]))
    g = unproject(np.ones((1, 16, 16)), ext, intr, GridSpec(4, 4.0))
    assert np.all(g.data[:, :, :2] == 0)  # z <= 0 half is behind the camera


def test_unproject_linearity():
    ext, intr = case_camera()
    rng = np.random.default_rng(2)
    X, Y = rng.random((2, 32, 32)), rng.random((2, 32, 32))
    spec = GridSpec(5, 3.0)
    lhs = unproject(2.5 * X - 0.7 * Y, ext, intr, spec).data
    rhs = 2.5 * unproject(X, ext, intr, spec).data - 0.7 * unproject(Y, ext, intr, spec).data
    assert np.abs(lhs - rhs).max() <= 1e-9


def test_translation_single_view_on_ray():
    intr = Intrinsics((50.0, 50.0), (31.5, 31.5), (64, 64))
    ext = look_at((0.3, 0.2, -6.0), (0.3, 0.2, 0.0))
    target = np.array([0.45, 0.05, 0.1])
    uv = intr.focal[0] * ext.apply(target)[:2] / ext.apply(target)[2] + np.array(intr.center)
    hm = joint_heatmaps(uv[None], [True], (64, 64), 2.0)
    spec = GridSpec(16, 3.0)
    t = estimate_translation([hm[0]], [ext], [intr], [None], spec)
    cam_pos = -ext.rotation.T @ ext.translation
    d = (target - cam_pos) / np.linalg.norm(target - cam_pos)
    off = (t - cam_pos) - np.dot(t - cam_pos, d) * d
    assert np.linalg.norm(off) <= np.sqrt(3) * spec.voxel_size


def test_translation_tie_midpoint_and_all_zero():
    spec = GridSpec(4, 4.0)
    data = np.zeros((4, 4, 4))
    data[1, 2, 0] = data[2, 2, 0] = 3.0
    c = argmax_center(VoxelGrid(spec, data))
    assert np.allclose(c, (spec.centers()[1, 2, 0] + spec.centers()[2, 2, 0]) / 2)
    with pytest.raises(AllZeroLikelihood):
        argmax_center(VoxelGrid(spec, np.zeros((4, 4, 4))))


def test_translation_equivariance(clean_samples):
    from mvhmr.features import FeatureConfig, blurred_heatmaps
    from mvhmr.bodymodel import PELVIS

    s = clean_samples[0]
    maps = [blurred_heatmaps(o, FeatureConfig())[PELVIS] for o in s.observations]
    crops = [o.crop for o in s.observations]
    spec = GridSpec(16, 3.0)
    a = estimate_translation(maps, s.rig.extrinsics, s.rig.intrinsics, crops, spec, 4)
    delta = np.array([0.25, -0.125, 0.5])  # dyadic so the voxel centres shift exactly
    rig2 = s.rig.translated(delta)
    b = estimate_translation(maps, rig2.extrinsics, rig2.intrinsics, crops, spec.recentered(delta), 4)
    assert np.abs(b - (a + delta)).max() <= 1e-9


def test_occupancy_iu_cases(frozen):
    spec = GridSpec(4, 1.0)
    rng = np.random.default_rng(3)
    one = VoxelGrid(spec, (rng.random((4, 4, 4, 1)) > 0.5).astype(float))
    i, u = occupancy_intersection_union([one])
    assert np.array_equal(i.data, one.data) and np.array_equal(u.data, one.data)
    a = np.zeros((4, 4, 4, 1))
    b = np.zeros((4, 4, 4, 1))
    a[:2] = 1
    b[2:] = 1
    i, u = occupancy_intersection_union(grids([a, b], spec))
    assert not i.data.any() and np.array_equal(u.data, a + b)
    _, _, occ, _ = cases.grids_case()
    i, u = occupancy_intersection_union(grids(occ))
    assert np.array_equal(i.data, np.array(frozen["occ_min"]))
    assert np.array_equal(u.data, np.array(frozen["occ_max"]))


def test_masked_fusion_cases(frozen):
    feats, mask, _, _ = cases.grids_case()
    spec = GridSpec(4, 3.0)
    ones = VoxelGrid(spec, np.ones((4, 4, 4, 1)))
    zeros = VoxelGrid(spec, np.zeros((4, 4, 4, 1)))
    assert np.array_equal(masked_fusion(grids(feats[:1]), ones).data, feats[0])
    assert not masked_fusion(grids(feats), zeros).data.any()
    out = masked_fusion(grids(feats), VoxelGrid(spec, mask)).data
    assert np.abs(out - np.array(frozen["masked_fusion"])).max() <= 1e-12


def test_fusion_spec_mismatch():
    a = VoxelGrid(GridSpec(4, 3.0), np.zeros((4, 4, 4, 2)))
    b = VoxelGrid(GridSpec(4, 2.0), np.zeros((4, 4, 4, 2)))
    with pytest.raises(SpecMismatch):
        mean_fusion([a, b])
    with pytest.raises(SpecMismatch):
        occupancy_intersection_union([a.channel(0), b.channel(0)])
    with pytest.raises(SpecMismatch):
        balanced_fusion([a, b], [a.channel(0), b.channel(0)])


def test_consistency_cases(frozen):
    m = np.zeros((6, 6), np.uint8)
    hm = np.random.default_rng(4).random((3, 6, 6))
    assert np.allclose(consistency_map(m, hm, m, hm, 1.0), 1.0)
    assert np.allclose(consistency_map(m, hm, m, hm, 0.5), 2.0)
    m2 = m.copy()
    m2[2, 3] = 1
    phi = consistency_map(m, hm, m2, hm, 1.0)
    assert phi[2, 3] == pytest.approx(0.5) and phi[0, 0] == 1.0
    a, h, b, rh = cases.consistency_case()
    assert np.abs(consistency_map(a, h, b, rh, 1.0) - np.array(frozen["consistency"])).max() <= 1e-12
    with pytest.raises(ValueError):
        consistency_map(m, hm, m, hm, 0.0)


def test_balance_weights_cases(frozen):
    spec = GridSpec(4, 3.0)
    rng = np.random.default_rng(5)
    g = rng.random((4, 4, 4, 1)) + 0.1
    w = balance_weights(grids([g, g, g], spec))
    assert all(np.allclose(x.data, 1 / 3) for x in w)
    w = balance_weights(grids([2 * g, g], spec))
    assert np.allclose(w[0].data, 2 / 3) and np.allclose(w[1].data, 1 / 3)
    w = balance_weights(grids([np.zeros_like(g)] * 4, spec))
    assert all(np.array_equal(x.data, np.full_like(g, 0.25)) for x in w)
    _, _, _, cons = cases.grids_case()
    w = balance_weights(grids(cons))
    for x, ref in zip(w, frozen["balance_weights"]):
        assert np.abs(x.data - np.array(ref)).max() <= 1e-12
    assert np.abs(sum(x.data for x in w) - 1).max() <= 1e-9


def test_balanced_fusion_cases(frozen):
    feats, _, _, cons = cases.grids_case()
    spec = GridSpec(4, 3.0)
    uni = [VoxelGrid(spec, np.full((4, 4, 4, 1), 1 / 3))] * 3
    assert np.abs(balanced_fusion(grids(feats), uni).data - mean_fusion(grids(feats)).data).max() <= 1e-15
    rng = np.random.default_rng(6)
    pick = rng.integers(0, 3, size=(4, 4, 4))
    onehot = [VoxelGrid(spec, (pick == n).astype(float)[..., None]) for n in range(3)]
    sel = np.choose(pick[..., None].repeat(3, -1), feats)
    assert np.array_equal(balanced_fusion(grids(feats), onehot).data, sel)
    w = balance_weights(grids(cons))
    assert np.abs(balanced_fusion(grids(feats), w).data - np.array(frozen["balanced_fusion"])).max() <= 1e-12


def test_grid_dump_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    g = VoxelGrid(GridSpec(5, 2.5, (0.1, 0.2, 0.3)), rng.random((5, 5, 5, 3)), "human")
    save_grid(tmp_path / "g.bin", g)
    h = load_grid(tmp_path / "g.bin")
    assert h.spec == g.spec and h.frame == "human"
    assert np.array_equal(h.data, g.data.astype("<f4").astype(float))
    with pytest.raises(ValueError):
        (tmp_path / "bad.bin").write_bytes(b"nope" * 4)
        load_grid(tmp_path / "bad.bin")
