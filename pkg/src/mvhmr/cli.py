"""Command-line entry point: synth, fit, eval, ablate, inspect-grid.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import run_sweep
from .bodymodel import TemplateConfig, export_obj, make_template
from .config import ConfigError, RunConfig, load_config, parse_override, to_dict
from .io import (
    MANIFEST,
    TEMPLATE_FILE,
    DataError,
    Dataset,
    dumps,
    hash_tree,
    load_gt,
    read_json,
    sample_dirname,
    save_sample,
    write_json,
    write_manifest,
)
from .metrics import DegenerateSet, evaluate
from .render2d import write_pgm
from .solver import DegenerateFrame, FitResult, NonFiniteObjective, evidence_grids, fit_progressive
from .synth import augment, generate_sample, sample_rng
from .volumetric import AllZeroLikelihood, load_grid, save_grid

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
NUMERIC_ERRORS = (NonFiniteObjective, AllZeroLikelihood, DegenerateFrame, DegenerateSet, FloatingPointError)
RESULTS_FORMAT = "mvhmr-results"
GEN_STREAM, AUG_STREAM = 0, 1


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _pool_map(fn, items, workers: int):
    """Ordered map; results come back in input order whatever the completion order."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------- synth


@lru_cache(maxsize=1)
def _template():
    return make_template(TemplateConfig())


@lru_cache(maxsize=4)
def _dataset(root: str) -> Dataset:
    return Dataset(root)


def _synth_one(job):
    root, cfg_dict, index = job
    cfg = _config_from_echo(cfg_dict)
    template = _template()
    synth = cfg.synth_config()
    s = generate_sample(synth, template, sample_rng(cfg.seed, index, GEN_STREAM), index)
    if cfg.augment:
        s = augment(s, synth, sample_rng(cfg.seed, index, AUG_STREAM))
    d = Path(root) / sample_dirname(index)
    save_sample(d, s)
    return {"index": index, "dir": d.name, "hash": hash_tree(d)}


def _config_from_echo(d: dict) -> RunConfig:
    from .config import from_dict

    return from_dict(RunConfig, d)


def write_dataset(root, cfg: RunConfig) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _template().save(root / TEMPLATE_FILE)
    echo = cfg.to_dict()
    entries = _pool_map(_synth_one, [(str(root), echo, i) for i in range(cfg.n_samples)], cfg.workers)
    write_manifest(root, cfg.synth_config(), entries, {"augment": cfg.augment, "run_config": echo})


def _same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all((a / p).read_bytes() == (b / p).read_bytes() for p in fa)


def cmd_synth(cfg: RunConfig) -> int:
    if not cfg.out:
        raise ConfigError("synth needs an output directory (--out)")
    out = Path(cfg.out)
    if out.exists() and any(out.iterdir()) and not (out / MANIFEST).exists():
        raise DataError(f"{out} exists, is not empty and holds no dataset")
    if (out / MANIFEST).exists():
        # idempotent re-run: regenerate next to it and require byte identity
        out.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory(dir=out.parent, prefix=".synth-") as tmp:
            write_dataset(tmp, cfg)
            if not _same_tree(Path(tmp), out):
                raise DataError(f"{out} differs from a fresh generation with this config; refusing to overwrite")
        log(f"verified {out}: {cfg.n_samples} samples byte-identical")
        return EXIT_OK
    write_dataset(out, cfg)
    log(f"wrote {cfg.n_samples} samples to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- fit


def _fit_key(sample_hash: str, solver_echo: dict) -> str:
    return hashlib.sha256((sample_hash + dumps(solver_echo)).encode()).hexdigest()


def _fit_one(job):
    data_dir, out_dir, i, solver_echo = job
    ds = _dataset(data_dir)
    entry = ds.entries[i]
    idx = entry["index"]
    name = sample_dirname(idx)
    try:
        h = ds.verify(i)
        key = _fit_key(h, solver_echo)
        res_path = Path(out_dir) / f"{name}.json"
        if res_path.exists():
            try:
                if read_json(res_path).get("key") == key:
                    return {"index": idx, "file": res_path.name, "key": key, "status": "ok", "skipped": True}
            except DataError:
                pass
        sample = ds.load(i)
        solver = _config_from_echo({"solver": solver_echo}).solver
        res = fit_progressive(sample.observations, sample.rig, ds.template, solver)
    except DataError as e:
        return {"index": idx, "status": "data_error", "error": str(e)}
    except NUMERIC_ERRORS as e:
        return {"index": idx, "status": "numeric_error", "error": f"{type(e).__name__}: {e}"}
    verts, _ = res.predict(ds.template)
    export_obj(Path(out_dir) / f"{name}.obj", verts, ds.template.faces)
    write_json(res_path, {"index": idx, "key": key, "sample_hash": h, "fit": res.to_dict()})
    return {"index": idx, "file": res_path.name, "key": key, "status": "ok", "skipped": False}


def cmd_fit(cfg: RunConfig) -> int:
    if not cfg.data_dir or not cfg.results_dir:
        raise ConfigError("fit needs --data and --out")
    _dataset.cache_clear()
    ds = Dataset(cfg.data_dir)
    out = Path(cfg.results_dir)
    out.mkdir(parents=True, exist_ok=True)
    solver_echo = to_dict(cfg.solver)
    jobs = [(str(ds.root), str(out), i, solver_echo) for i in range(len(ds))]
    rows = _pool_map(_fit_one, jobs, cfg.workers)
    status = EXIT_OK
    for r in rows:
        if r["status"] == "data_error":
            log(f"sample {r['index']}: data error: {r['error']}")
            status = max(status, EXIT_DATA)
        elif r["status"] == "numeric_error":
            log(f"sample {r['index']}: numeric failure: {r['error']}")
            status = EXIT_DATA if status == EXIT_DATA else EXIT_NUMERIC
    write_json(
        out / MANIFEST,
        {
            "format": RESULTS_FORMAT,
            "version": __version__,
            "dataset": str(ds.root),
            "dataset_manifest_sha256": hashlib.sha256((ds.root / MANIFEST).read_bytes()).hexdigest(),
            "run_config": cfg.to_dict(),
            "samples": [{k: v for k, v in r.items() if k != "skipped"} for r in rows],
        },
    )
    done = sum(r["status"] == "ok" for r in rows)
    skipped = sum(bool(r.get("skipped")) for r in rows)
    log(f"fit {done}/{len(rows)} samples ({skipped} reused) -> {out}")
    return status


# --------------------------------------------------------------------------- eval


def cmd_eval(cfg: RunConfig, stage: int = -1) -> str:
    if not cfg.data_dir or not cfg.results_dir:
        raise ConfigError("eval needs --data and --results")
    ds = Dataset(cfg.data_dir)
    res_dir = Path(cfg.results_dir)
    man = read_json(res_dir / MANIFEST)
    if man.get("format") != RESULTS_FORMAT:
        raise DataError(f"{res_dir}: not a results directory")
    if man.get("dataset_manifest_sha256") != hashlib.sha256((ds.root / MANIFEST).read_bytes()).hexdigest():
        raise DataError("results were produced from a different dataset manifest")
    missing = [e["index"] for e in ds.entries if not (res_dir / f"{sample_dirname(e['index'])}.json").exists()]
    if missing:
        raise DataError(f"missing fit results for samples {missing}")
    preds, gts, ids = [], [], []
    for i, e in enumerate(ds.entries):
        r = read_json(res_dir / f"{sample_dirname(e['index'])}.json")
        try:
            fit = FitResult.from_dict(r["fit"])
        except (KeyError, ValueError) as err:
            raise DataError(f"sample {e['index']}: corrupt result: {err}") from err
        preds.append(fit.predict(ds.template, stage))
        gts.append(load_gt(ds.sample_path(i), ds.template))
        ids.append(e["index"])
    mode = man.get("run_config", {}).get("solver", {}).get("mode", "")
    report = evaluate(preds, gts, mode, ids)
    text = report.to_csv()
    out = Path(cfg.out) if cfg.out else res_dir / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    agg = report.aggregate()
    log(
        f"{report.count} samples: MPJPE {agg['mpjpe_mm']:.1f} mm, PMPJPE {agg['pmpjpe_mm']:.1f} mm, "
        f"PVE {agg['pve_mm']:.1f} mm, PPVE {agg['ppve_mm']:.1f} mm -> {out}"
    )
    return text


# --------------------------------------------------------------------------- ablate


def cmd_ablate(cfg: RunConfig) -> int:
    if not cfg.out:
        raise ConfigError("ablate needs an output directory (--out)")
    template = _template()
    if cfg.data_dir:
        ds = Dataset(cfg.data_dir)
        template = ds.template
        samples = [ds.load(i) for i in range(min(len(ds), cfg.sweep.n_samples))]
        base = ds.config
    else:
        base = cfg.synth_config()
        samples = [
            generate_sample(base, template, sample_rng(cfg.seed, i, GEN_STREAM), i) for i in range(cfg.sweep.n_samples)
        ]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_sweep(
        samples, template, base, cfg.solver, cfg.variants, cfg.sweep.target, cfg.sweep.probs, cfg.seed,
        progress=lambda p, i: log(f"p={p:g} sample {i}") if i == samples[-1].index else None,
    )  # fmt: skip
    (out / "ablate.csv").write_text(res.long_csv())
    (out / "trials.csv").write_text(res.trials_csv())
    write_json(out / "summary.json", {"run_config": cfg.to_dict(), **res.summary()})
    for v in res.variants:
        log(f"{v:>12}: " + " ".join(f"{m:6.1f}" for m in res.mean(v)) + f"  rho={res.spearman(v):.2f}")
    return EXIT_OK


# --------------------------------------------------------------------------- inspect-grid


def cmd_inspect_grid(args, cfg: RunConfig) -> int:
    if args.grid_file:
        grid = load_grid(args.grid_file)
    else:
        if not cfg.data_dir:
            raise ConfigError("inspect-grid needs --grid-file or --data")
        ds = Dataset(cfg.data_dir)
        ids = [e["index"] for e in ds.entries]
        if args.sample not in ids:
            raise DataError(f"sample {args.sample} not in dataset")
        pos = ids.index(args.sample)
        s = ds.load(pos)
        grids = evidence_grids(s.observations, s.rig, cfg.solver)
        if args.grid not in grids:
            raise ConfigError(f"--grid must be one of {sorted(grids)}")
        grid = grids[args.grid]
        if args.dump:
            save_grid(args.dump, grid)
    if not 0 <= args.channel < grid.channels:
        raise ConfigError(f"channel must lie in [0, {grid.channels})")
    G = grid.spec.G
    k = G // 2 if args.index is None else args.index
    if not 0 <= k < G:
        raise ConfigError(f"slice index must lie in [0, {G})")
    axis = "xyz".index(args.axis)
    sl = np.take(grid.data[..., args.channel], k, axis=axis)
    peak = sl.max()
    img = np.zeros(sl.shape, np.uint8) if peak <= 0 else np.round(255 * np.clip(sl / peak, 0, 1)).astype(np.uint8)
    # rows follow the second remaining axis so the image reads with the first axis horizontal
    write_pgm(args.out, img.T[::-1] if args.flip else img.T)
    log(f"slice {args.axis}={k} of channel {args.channel} (max {peak:.4g}) -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, e.g. solver.grid_g=8")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvhmr", description="Multi-view volumetric human mesh recovery toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multi-view dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, dest="n_samples")
    p.add_argument("--augment", action="store_true", default=None)

    p = sub.add_parser("fit", help="fit the body model to every sample of a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("progressive", "naive"))
    p.add_argument("--grid-g", type=int)
    p.add_argument("--cube-l", type=float)
    p.add_argument("--max-iters", type=int)

    p = sub.add_parser("eval", help="score fit results against ground truth")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out", help="CSV path (default RESULTS/metrics.csv)")
    p.add_argument("--stage", type=int, default=-1, help="which stage estimate to score (default: last)")

    p = sub.add_parser("ablate", help="perturbation sweep over solver variants")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset to corrupt (default: synthesise clean samples)")
    p.add_argument("--n", type=int, dest="n_samples")
    p.add_argument("--target", choices=("mask", "joints"))
    p.add_argument("--probs", type=float, nargs="+")

    p = sub.add_parser("inspect-grid", help="write one slice of an evidence grid as PGM")
    _common(p)
    p.add_argument("--out", required=True, help="output PGM")
    p.add_argument("--grid-file", help="read a dumped grid instead of recomputing")
    p.add_argument("--data")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--grid", default="features_none")
    p.add_argument("--dump", help="also dump the whole grid to this file")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int)
    p.add_argument("--flip", action="store_true", help="flip vertically (y up)")
    return ap


def _overrides(args) -> dict:
    o = dict(parse_override(s) for s in args.set)
    flag_map = {
        "seed": "seed",
        "workers": "workers",
        "n_samples": "n_samples",
        "augment": "augment",
        "mode": "solver.mode",
        "grid_g": "solver.grid_g",
        "cube_l": "solver.cube_l",
        "max_iters": "solver.max_iters",
        "target": "sweep.target",
        "probs": "sweep.probs",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            o[key] = v
    if args.command == "ablate" and args.n_samples is not None:
        o["sweep.n_samples"] = o.pop("n_samples")
    if args.command == "synth":
        o["out"] = args.out
    elif args.command == "fit":
        o["data_dir"], o["results_dir"] = args.data, args.out
    elif args.command == "eval":
        o["data_dir"], o["results_dir"] = args.data, args.results
        if args.out:
            o["out"] = args.out
    elif args.command == "ablate":
        o["out"] = args.out
        if args.data:
            o["data_dir"] = args.data
    elif args.command == "inspect-grid" and args.data:
        o["data_dir"] = args.data
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "eval":
            cmd_eval(cfg, args.stage)
            return EXIT_OK
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_inspect_grid(args, cfg)
    except ConfigError as e:
        log(f"config error: {e}")
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        log(f"data error: {e}")
        return EXIT_DATA
    except NUMERIC_ERRORS as e:
        log(f"numeric failure: {type(e).__name__}: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
