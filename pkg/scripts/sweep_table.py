"""Print the per-point mean PMPJPE of one or more ``mvhmr ablate`` runs as a markdown table.

    python3 scripts/sweep_table.py runs/ablate [runs/ablate_extra ...]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dirs", nargs="+", help="ablate output directories (each holds summary.json)")
    args = ap.parse_args()
    rows, probs = [], None
    for d in args.dirs:
        s = json.loads((Path(d) / "summary.json").read_text())
        probs = probs or s["probs"]
        if s["probs"] != probs:
            raise SystemExit(f"{d}: different sweep points")
        for name, v in s["variants"].items():
            rows.append((name, v["mean_pmpjpe_mm"], v["spearman_pmpjpe"]))
        if "progressive_vs_naive" in s:
            pv = s["progressive_vs_naive"]
            print(f"{d}: progressive <= naive at {pv['points_won']}/{pv['points']} points, "
                  f"trial win rate " + " ".join(f"{r:.2f}" for r in pv["trial_win_rate"]))  # fmt: skip
    print()
    print("| variant | " + " | ".join(f"{p:g}" for p in probs) + " | rho |")
    print("|---" * (len(probs) + 2) + "|")
    for name, means, rho in rows:
        print(f"| {name} | " + " | ".join(f"{m:.1f}" for m in means) + f" | {rho:.2f} |")


if __name__ == "__main__":
    main()
