"""On-disk formats: rigs, samples, datasets, fit results."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .bodymodel import BodyParams, BodyTemplate, forward
from .camera import CameraRig, Extrinsics, Intrinsics
from .render2d import CropInfo, ViewObservation, read_pgm, write_pgm
from .synth import SynthConfig, TrainingSample

DATASET_FORMAT = "mvhmr-dataset"
DATASET_VERSION = 1
MANIFEST = "manifest.json"
TEMPLATE_FILE = "template.npz"


class DataError(RuntimeError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: {e}") from e


# --------------------------------------------------------------------------- rig


def rig_to_dict(rig: CameraRig) -> dict:
    views = []
    for k, e in zip(rig.intrinsics, rig.extrinsics):
        views.append(
            {
                "K": k.K.tolist(),
                "R": e.rotation.ravel().tolist(),
                "T": e.translation.tolist(),
                "image_size": list(k.image_size),
            }
        )
    return {"views": views}


def rig_from_dict(d: dict) -> CameraRig:
    intr, ext = [], []
    for v in d["views"]:
        K = np.asarray(v["K"], dtype=float)
        intr.append(Intrinsics((K[0, 0], K[1, 1]), (K[0, 2], K[1, 2]), tuple(int(x) for x in v["image_size"])))
        e = Extrinsics(np.asarray(v["R"], dtype=float).reshape(3, 3), np.asarray(v["T"], dtype=float))
        e.check(1e-6)
        ext.append(e)
    return CameraRig(tuple(intr), tuple(ext))


def save_rig(path, rig: CameraRig) -> None:
    write_json(path, rig_to_dict(rig))


def load_rig(path) -> CameraRig:
    return rig_from_dict(read_json(path))


# --------------------------------------------------------------------------- samples


def sample_dirname(index: int) -> str:
    return f"sample_{index:05d}"


def save_sample(directory, sample: TrainingSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_rig(d / "rig.json", sample.rig)
    write_json(
        d / "gt.json",
        {"index": sample.index, "params": sample.gt_params.to_dict(), "pelvis_world": sample.pelvis_world.tolist()},
    )
    for n, o in enumerate(sample.observations):
        vd = d / f"view_{n}"
        vd.mkdir(exist_ok=True)
        write_pgm(vd / "mask.pgm", o.mask * np.uint8(255))
        write_pgm(vd / "parts.pgm", o.parts if o.parts is not None else o.mask)
        write_json(
            vd / "view.json",
            {
                "joints2d": o.joints2d.tolist(),
                "visibility": o.joint_visibility.astype(int).tolist(),
                "crop": o.crop.to_dict(),
            },
        )


def load_sample(directory, template: BodyTemplate, sigma_px: float, tau_heat: float) -> TrainingSample:
    d = Path(directory)
    try:
        rig = load_rig(d / "rig.json")
        gt = read_json(d / "gt.json")
        params = BodyParams.from_dict(gt["params"])
        obs = []
        for n in range(len(rig)):
            vd = d / f"view_{n}"
            meta = read_json(vd / "view.json")
            mask = (read_pgm(vd / "mask.pgm") > 127).astype(np.uint8)
            parts = read_pgm(vd / "parts.pgm")
            obs.append(
                ViewObservation.build(
                    np.asarray(meta["joints2d"], dtype=float),
                    np.asarray(meta["visibility"], dtype=bool),
                    mask,
                    CropInfo.from_dict(meta["crop"]),
                    parts,
                    sigma_px,
                    tau_heat,
                )
            )
    except DataError:
        raise
    except (KeyError, ValueError, OSError, IndexError) as e:
        raise DataError(f"{d}: {e}") from e
    body = forward(template, params)
    return TrainingSample(
        tuple(obs), params, body.vertices, body.joints3d, np.asarray(gt["pelvis_world"], dtype=float), rig,
        int(gt["index"]),
    )  # fmt: skip


def load_gt(directory, template: BodyTemplate):
    """Ground-truth (vertices, joints) of a stored sample, world orientation, pelvis at the origin."""
    try:
        gt = read_json(Path(directory) / "gt.json")
        body = forward(template, BodyParams.from_dict(gt["params"]))
    except (KeyError, ValueError) as e:
        raise DataError(f"{directory}: {e}") from e
    return body.vertices, body.joints3d


def hash_tree(directory) -> str:
    """SHA-256 over relative paths and contents of every file below ``directory``."""
    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(x for x in root.rglob("*") if x.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- dataset


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / MANIFEST).exists():
            raise DataError(f"{self.root}: no {MANIFEST}")
        self.manifest = read_json(self.root / MANIFEST)
        if self.manifest.get("format") != DATASET_FORMAT:
            raise DataError(f"{self.root}: not a dataset manifest")
        self.config = SynthConfig.from_dict(self.manifest["synth_config"])
        tpath = self.root / TEMPLATE_FILE
        try:
            self.template = BodyTemplate.load(tpath)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"{tpath}: {e}") from e

    def __len__(self) -> int:
        return len(self.manifest["samples"])

    @property
    def entries(self) -> list[dict]:
        return self.manifest["samples"]

    def sample_path(self, i: int) -> Path:
        return self.root / self.entries[i]["dir"]

    def load(self, i: int) -> TrainingSample:
        return load_sample(self.sample_path(i), self.template, self.config.sigma_px, self.config.tau_heat)

    def verify(self, i: int) -> str:
        h = hash_tree(self.sample_path(i))
        if h != self.entries[i]["hash"]:
            raise DataError(f"sample {self.entries[i]['index']}: content hash mismatch")
        return h


def write_manifest(root, config: SynthConfig, entries: list[dict], extra: dict) -> None:
    write_json(
        Path(root) / MANIFEST,
        {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "n_samples": len(entries),
            "seed": config.seed,
            "synth_config": config.to_dict(),
            "samples": entries,
            **extra,
        },
    )
