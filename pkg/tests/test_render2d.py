from __future__ import annotations

import numpy as np
import pytest

import cases
import oracles
from mvhmr.bodymodel import BodyParams, forward
from mvhmr.camera import Extrinsics, Intrinsics, look_at, project_persp
from mvhmr.render2d import (
    TAU_HEAT,
    CropInfo,
    EmptyForeground,
    EmptySilhouette,
    ViewObservation,
    crop_and_resize,
    crop_box,
    joint_heatmaps,
    occupancy_map,
    project_vertices,
    rasterize_labels,
    rasterize_mask,
    read_float_array,
    read_pgm,
    write_float_array,
    write_pgm,
)


def small_cam(size=48, dist=3.0):
    ext = look_at((0.4, 0.3, -dist))
    return ext, Intrinsics((40.0, 40.0), (size / 2 - 0.5, size / 2 - 0.5), (size, size))


def test_single_large_triangle():
    uv = np.array([[-100.0, -100.0], [300.0, -50.0], [20.0, 300.0]])
    img = rasterize_labels(uv, np.array([[0, 1, 2]]), (32, 32))
    assert img[16, 16] == 1
    uv2 = np.array([[5.0, 5.0], [20.0, 6.0], [8.0, 25.0]])
    img2 = rasterize_labels(uv2, np.array([[0, 1, 2]]), (32, 32))
    assert img2[16, 10] == 1 and img2[0, 0] == 0 and img2[31, 31] == 0


def test_body_behind_camera_empty(template):
    body = forward(template, BodyParams.zeros())
    ext = Extrinsics(np.eye(3), np.array([0, 0, -5.0]))
    intr = Intrinsics((100.0, 100.0), (32.0, 32.0), (64, 64))
    with pytest.raises(EmptySilhouette):
        rasterize_mask(body.vertices, template.faces, ext, intr, (64, 64))


def test_raster_matches_frozen_oracle(frozen):
    uv, faces, size = cases.raster_case()
    assert np.array_equal(rasterize_labels(uv, faces, size), np.array(frozen["raster"], dtype=np.uint8))


def test_body_mask_matches_brute_force(template):
    rng = np.random.default_rng(0)
    p = BodyParams(rng.normal(scale=0.3, size=(16, 3)), rng.normal(size=10))
    body = forward(template, p)
    ext, intr = small_cam(40)
    mask = rasterize_mask(body.vertices, template.faces, ext, intr, (40, 40))
    uv, front = project_vertices(body.vertices, ext, intr)
    assert front.all()
    assert np.array_equal(mask, oracles.raster_oracle(uv, template.faces, 40, 40))


def test_raster_invariant_to_face_order(template):
    body = forward(template, BodyParams.zeros())
    ext, intr = small_cam(64)
    a = rasterize_mask(body.vertices, template.faces, ext, intr, (64, 64))
    rng = np.random.default_rng(1)
    f = template.faces[rng.permutation(len(template.faces))]
    f = np.stack([np.roll(row, rng.integers(3)) if rng.random() < 0.5 else row[::-1] for row in f])
    b = rasterize_mask(body.vertices, f, ext, intr, (64, 64))
    assert np.array_equal(a, b)


def test_heatmap_peak_and_sigma():
    hm = joint_heatmaps(np.array([[10.0, 12.0]]), [True], (32, 32), 4.0)
    assert hm[0, 12, 10] == 1.0
    assert hm[0, 12, 14] == pytest.approx(np.exp(-0.5), abs=1e-6)
    assert hm.max() <= 1.0


def test_heatmap_invisible_channel_zero():
    hm = joint_heatmaps(np.array([[10.0, 12.0], [3.0, 4.0]]), [True, False], (16, 16), 4.0)
    assert not hm[1].any()


def test_heatmaps_match_oracle():
    rng = np.random.default_rng(2)
    j = rng.uniform(-3, 20, size=(5, 2))
    vis = np.array([True, True, False, True, True])
    assert np.abs(joint_heatmaps(j, vis, (16, 18), 3.0) - oracles.heatmap_oracle(j, vis, 16, 18, 3.0)).max() < 1e-14


def test_occupancy_basic_cases():
    z = np.zeros((3, 8, 8))
    m = np.zeros((8, 8), np.uint8)
    assert not occupancy_map(z, m).any()
    m[2:5, 3:6] = 1
    assert np.array_equal(occupancy_map(z, m), m)


def test_occupancy_matches_oracle():
    rng = np.random.default_rng(3)
    hm = joint_heatmaps(rng.uniform(0, 20, (4, 2)), [True] * 4, (20, 20), 2.0)
    m = (rng.random((20, 20)) > 0.8).astype(np.uint8)
    assert np.array_equal(occupancy_map(hm, m), oracles.occupancy_oracle(hm, m, TAU_HEAT))


def test_crop_identity_when_foreground_fills_target():
    m = np.zeros((400, 400), np.uint8)
    m[50:306, 100:356] = 1
    c = crop_box(m, bbox_scale=1.0, size=256)
    assert c.scale == pytest.approx(1.0)
    assert np.allclose(c.offset, (-100.0, -50.0))


def test_crop_scale_12_shrinks_foreground():
    m = np.zeros((300, 300), np.uint8)
    m[40:200, 60:140] = 1
    obs = crop_and_resize(m, np.zeros((0, 2)), np.zeros(0, bool), 1.2, 256)
    ys, xs = np.nonzero(obs.mask)
    assert (ys.max() - ys.min() + 1) <= 256 / 1.2 + 1
    assert (xs.max() - xs.min() + 1) <= 256 / 1.2 + 1


def test_crop_rejects_bad_scale_and_empty():
    m = np.ones((10, 10), np.uint8)
    with pytest.raises(ValueError):
        crop_box(m, bbox_scale=1.5)
    with pytest.raises(EmptyForeground):
        crop_box(np.zeros((10, 10), np.uint8))


def test_crop_round_trip_and_intrinsics():
    rng = np.random.default_rng(4)
    c = CropInfo(0.37, (-120.3, 14.2))
    p = rng.uniform(0, 1024, size=(200, 2))
    assert np.abs(c.from_crop(c.to_crop(p)) - p).max() <= 0.5
    intr = Intrinsics((5000.0, 5000.0), (512.0, 512.0), (1024, 1024))
    ext = Extrinsics(np.eye(3), np.array([0.0, 0.0, 40.0]))
    X = rng.normal(size=(20, 3))
    a = c.to_crop(project_persp(X, ext, intr))
    b = project_persp(X, ext, c.intrinsics(intr))
    assert np.abs(a - b).max() <= 1e-9


def test_crop_and_resize_heatmap_peaks_at_cropped_joints():
    m = np.zeros((200, 200), np.uint8)
    m[50:150, 80:120] = 1
    j = np.array([[100.0, 60.0], [90.0, 140.0]])
    obs = crop_and_resize(m, j, np.array([True, True]), 1.1, 64, 2.0)
    q = obs.crop.to_crop(j)
    for k in range(2):
        i, jj = np.unravel_index(obs.heatmaps[k].argmax(), obs.heatmaps[k].shape)
        assert abs(jj - q[k, 0]) <= 0.5 and abs(i - q[k, 1]) <= 0.5
    assert obs.mask.shape == (64, 64)
    assert np.all(obs.occupancy >= obs.mask)


def test_view_observation_build_invariants():
    rng = np.random.default_rng(5)
    mask = (rng.random((32, 32)) > 0.7).astype(np.uint8)
    obs = ViewObservation.build(rng.uniform(0, 31, (17, 2)), rng.random(17) > 0.3, mask, CropInfo.identity((32, 32)))
    assert np.all(obs.occupancy >= obs.mask)
    assert np.all(obs.occupancy >= (obs.heatmaps > TAU_HEAT).any(0))


def test_pgm_and_float_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.integers(0, 256, size=(7, 11), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    arr = rng.random((3, 4, 5)).astype(np.float32)
    write_float_array(tmp_path / "h.bin", arr)
    assert np.array_equal(read_float_array(tmp_path / "h.bin"), arr)
    # fixed input gives fixed bytes
    write_pgm(tmp_path / "b.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
