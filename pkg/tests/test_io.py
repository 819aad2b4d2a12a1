from __future__ import annotations

import json

import numpy as np
import pytest

from mvhmr.bodymodel import BodyTemplate
from mvhmr.io import (
    DataError,
    Dataset,
    hash_tree,
    load_gt,
    load_rig,
    load_sample,
    read_json,
    sample_dirname,
    save_rig,
    save_sample,
    write_manifest,
)
from mvhmr.synth import SynthConfig


def test_rig_round_trip(tmp_path, clean_samples):
    rig = clean_samples[0].rig
    save_rig(tmp_path / "rig.json", rig)
    back = load_rig(tmp_path / "rig.json")
    for a, b in zip(rig.extrinsics, back.extrinsics):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)
    for a, b in zip(rig.intrinsics, back.intrinsics):
        assert np.allclose(a.K, b.K) and a.image_size == b.image_size


def test_rig_rejects_non_rotation(tmp_path, clean_samples):
    save_rig(tmp_path / "rig.json", clean_samples[0].rig)
    d = read_json(tmp_path / "rig.json")
    d["views"][0]["R"] = [2.0, 0, 0, 0, 1, 0, 0, 0, 1]
    (tmp_path / "rig.json").write_text(json.dumps(d))
    with pytest.raises(Exception):
        load_rig(tmp_path / "rig.json")


def test_sample_round_trip(tmp_path, clean_samples, template):
    s = clean_samples[0]
    save_sample(tmp_path / "s", s)
    cfg = SynthConfig()
    back = load_sample(tmp_path / "s", template, cfg.sigma_px, cfg.tau_heat)
    assert back.index == s.index
    assert np.allclose(back.gt_vertices, s.gt_vertices, atol=1e-12)
    assert np.allclose(back.pelvis_world, s.pelvis_world, atol=1e-12)
    for a, b in zip(s.observations, back.observations):
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.joint_visibility, b.joint_visibility)
        assert np.allclose(a.joints2d, b.joints2d, atol=1e-12)
        assert np.allclose(a.heatmaps, b.heatmaps, atol=1e-6)
        assert np.array_equal(a.occupancy, b.occupancy)
    v, j = load_gt(tmp_path / "s", template)
    assert np.allclose(v, s.gt_vertices, atol=1e-12) and np.allclose(j, s.gt_joints3d, atol=1e-12)


def test_save_sample_deterministic_bytes(tmp_path, clean_samples):
    save_sample(tmp_path / "a", clean_samples[1])
    save_sample(tmp_path / "b", clean_samples[1])
    assert hash_tree(tmp_path / "a") == hash_tree(tmp_path / "b")


def test_hash_tree_sensitive_to_content_and_names(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x").write_bytes(b"1")
    h = hash_tree(tmp_path / "a")
    (tmp_path / "a" / "x").write_bytes(b"2")
    assert hash_tree(tmp_path / "a") != h
    (tmp_path / "a" / "x").write_bytes(b"1")
    (tmp_path / "a" / "x").rename(tmp_path / "a" / "y")
    assert hash_tree(tmp_path / "a") != h


def test_corrupt_sample_raises_data_error(tmp_path, clean_samples, template):
    save_sample(tmp_path / "s", clean_samples[0])
    (tmp_path / "s" / "view_1" / "view.json").write_text("{}")
    with pytest.raises(DataError):
        load_sample(tmp_path / "s", template, 4.0, 0.5)
    (tmp_path / "s" / "gt.json").unlink()
    with pytest.raises(DataError):
        load_sample(tmp_path / "s", template, 4.0, 0.5)


def test_sample_dirname():
    assert sample_dirname(7) == "sample_00007"


def _dataset(root, samples, template):
    root.mkdir()
    template.save(root / "template.npz")
    entries = []
    for s in samples:
        d = root / sample_dirname(s.index)
        save_sample(d, s)
        entries.append({"index": s.index, "dir": d.name, "hash": hash_tree(d)})
    write_manifest(root, SynthConfig().clean(), entries, {})
    return Dataset(root)


def test_dataset_load_and_verify(tmp_path, clean_samples, template):
    ds = _dataset(tmp_path / "d", clean_samples[:2], template)
    assert len(ds) == 2 and ds.manifest["n_samples"] == 2
    assert ds.load(1).index == clean_samples[1].index
    ds.verify(0)
    (ds.sample_path(0) / "gt.json").write_text(ds.sample_path(0).joinpath("gt.json").read_text() + " ")
    with pytest.raises(DataError, match="hash"):
        ds.verify(0)


def test_template_save_load(tmp_path, template):
    template.save(tmp_path / "t.npz")
    back = BodyTemplate.load(tmp_path / "t.npz")
    assert np.array_equal(back.rest_vertices, template.rest_vertices)
    assert np.array_equal(back.faces, template.faces)


def test_dataset_rejects_missing_or_foreign(tmp_path):
    with pytest.raises(DataError):
        Dataset(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(DataError):
        Dataset(tmp_path)
