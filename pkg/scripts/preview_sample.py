"""Write greyscale previews of one stored sample: mask, summed heatmaps and occupancy per view.

    python3 scripts/preview_sample.py DATASET --sample 0 --out preview/
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from mvhmr.io import Dataset
from mvhmr.render2d import write_pgm


def to_u8(img: np.ndarray) -> np.ndarray:
    peak = float(img.max())
    return np.zeros(img.shape, np.uint8) if peak <= 0 else np.round(255 * img / peak).astype(np.uint8)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data")
    ap.add_argument("--sample", type=int, default=0, help="position in the manifest")
    ap.add_argument("--out", default="preview")
    args = ap.parse_args()
    ds = Dataset(args.data)
    s = ds.load(args.sample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, o in enumerate(s.observations):
        write_pgm(out / f"view{n}_mask.pgm", o.mask * np.uint8(255))
        write_pgm(out / f"view{n}_heatmaps.pgm", to_u8(o.heatmaps.max(axis=0)))
        write_pgm(out / f"view{n}_occupancy.pgm", o.occupancy * np.uint8(255))
    print(f"sample {s.index}: {len(s.observations)} views -> {out}")


if __name__ == "__main__":
    main()
