"""Run the scalar reference implementations on the seeded cases and store the results.

The JSON written here is what the unit tests compare the package against.
Regenerate only when a case definition in tests/cases.py changes.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import cases  # noqa: E402
import oracles  # noqa: E402

from mvhmr.bodymodel import TemplateConfig, make_template  # noqa: E402


def main() -> None:
    out = {}
    template = make_template(TemplateConfig())
    tj, beta, tg = cases.fk_case()
    verts, joints = oracles.fk_oracle(template, tj, beta, tg)
    out["fk_joints"] = joints.tolist()
    out["fk_vertex_sum"] = verts.sum(axis=0).tolist()

    maps, R, T, K, kw = cases.unproject_case()
    out["unproject"] = oracles.unproject_oracle(
        maps, R, T, K, kw["G"], kw["L"], kw["center"], kw["crop_scale"], kw["crop_offset"], kw["ds"]
    ).tolist()

    feats, mask, occ, cons = cases.grids_case()
    out["masked_fusion"] = oracles.fusion_oracle(feats, mask).tolist()
    lo, hi = oracles.minmax_oracle(occ)
    out["occ_min"], out["occ_max"] = lo.tolist(), hi.tolist()
    w = oracles.weights_oracle(cons)
    out["balance_weights"] = [x.tolist() for x in w]
    out["balanced_fusion"] = oracles.balanced_oracle(feats, w).tolist()

    uv, faces, (H, W) = cases.raster_case()
    out["raster"] = oracles.raster_oracle(uv, faces, H, W).tolist()

    m, hm, rm, rhm = cases.consistency_case()
    out["consistency"] = oracles.consistency_oracle(m, hm, rm, rhm, 1.0).tolist()

    pts, R, T, K = cases.persp_case()
    out["persp"] = oracles.persp_oracle(pts, R, T, K).tolist()

    path = ROOT / "tests" / "data" / "frozen.json"
    path.parent.mkdir(exist_ok=True)
    path.write_text(json.dumps(out, indent=1) + "\n")
    print(f"wrote {path} ({len(out)} entries)")


if __name__ == "__main__":
    np.set_printoptions(precision=17)
    main()
