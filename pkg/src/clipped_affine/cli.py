"""Command-line interface: ``solve``, ``sweep``, ``plot`` and ``report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .config import load_config
from .core import DomainError, Deterministic, Rayleigh, scenario_from
from .mdp import LOOKAHEAD_MODES, ConvergenceError, preset_grid, solve_cached
from .sim import evaluate, loss_table, write_outputs

CACHE_ENV = "CLIPPED_AFFINE_CACHE"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("clipped_affine")


def _cache_dir(args, cfg=None):
    return args.cache or (cfg.cache_dir if cfg else None) or os.environ.get(CACHE_ENV)


def _config(args):
    schemes = args.schemes.split(",") if getattr(args, "schemes", None) else None
    return load_config(args.config, seed=args.seed, preset=args.preset, schemes=schemes,
                       output_dir=args.out)


def _provenance(cfg):
    return {"config_hash": cfg.digest(), "seed": cfg.seed, "version": __version__}


def cmd_solve(args) -> int:
    cfg = _config(args)
    modes = LOOKAHEAD_MODES if args.lookahead == "all" else (args.lookahead,)
    channel = Deterministic(1.0) if args.channel == "deterministic" else Rayleigh()
    try:
        scenario = scenario_from(args.family, args.nmcr, args.nsnr, channel)
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cache = _cache_dir(args, cfg)
    print(f"{'lookahead':<10} {'gain':>14} {'iterations':>10} {'cached':>7}")
    status = EXIT_OK
    for mode in modes:
        grid = preset_grid(cfg.preset, mode)
        try:
            sol, hit = solve_cached(scenario, grid, mode, cache, cfg.solver_tol)
        except ConvergenceError as exc:
            hist = exc.solution.gain_history if exc.solution else []
            print(f"{mode:<10} failed: {exc}; gain history {hist}", file=sys.stderr)
            status = EXIT_FAILED
            continue
        print(f"{mode:<10} {sol.gain:>14.10f} {sol.iterations:>10d} {str(hit):>7}")
    return status


def cmd_sweep(args) -> int:
    cfg = _config(args)
    plan = cfg.plan()
    out = Path(cfg.output_dir)
    t0 = time.time()

    def progress(done, total):
        log.info("cell %d/%d done (%.0fs)", done, total, time.time() - t0)

    report = evaluate(plan, _cache_dir(args, cfg), jobs=args.jobs,
                      provenance=_provenance(cfg), progress=progress)
    paths = write_outputs(report, out)
    print(loss_table(report))
    print(f"wrote {paths['csv']} and {paths['summary']} in {time.time() - t0:.1f}s")
    for cell, err in report.failures:
        print(f"cell {cell} failed: {err}", file=sys.stderr)
    return EXIT_FAILED if report.failures else EXIT_OK


def _read_series(path: Path):
    meta, rows, lines = {}, [], []
    with open(path) as fh:
        for ln in fh:
            if ln.startswith("#"):
                key, _, val = ln[1:].strip().partition(": ")
                meta[key] = val
            else:
                lines.append(ln)
    reader = csv.reader(lines)
    header = next(reader)
    for r in reader:
        rows.append([float(x) if x else math.nan for x in r])
    return meta, header, rows


def plot_series(series_path: Path, out_dir: Path, schemes=None) -> Path:
    """Render one OMF-vs-NSNR figure as SVG; returns its path."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta, header, rows = _read_series(series_path)
    cols = [s for s in header[1:] if schemes is None or s in schemes]
    if not cols:
        raise ValueError(f"{series_path}: no schemes to plot")
    x = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    values = []
    for s in cols:
        y = [r[header.index(s)] for r in rows]
        values += [v for v in y if not math.isnan(v)]
        ax.plot(x, y, marker="o", ms=3, label=s)
    lo = min([0.8] + values)
    hi = max([1.05] + values)
    pad = 0.01 * (hi - lo)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_xlabel("NSNR (dB)")
    ax.set_ylabel("OMF")
    ax.set_title(series_path.stem.replace("omf_", "").replace("_", ", "))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{series_path.stem}.svg"
    desc = json.dumps({"y_range": [lo - pad, hi + pad], **meta}, sort_keys=True)
    fig.savefig(path, format="svg", metadata={"Description": desc, "Date": None})
    plt.close(fig)
    return path


def cmd_plot(args) -> int:
    out = Path(args.out or "results")
    schemes = args.schemes.split(",") if args.schemes else None
    if schemes is not None and not any(schemes):
        print("error: empty scheme list", file=sys.stderr)
        return EXIT_CONFIG
    files = sorted((out / "series").glob("omf_*.csv"))
    if not files:
        print(f"warning: no series files under {out / 'series'}", file=sys.stderr)
        return EXIT_FAILED
    for f in files:
        try:
            print(plot_series(f, out / "plots", schemes))
        except ValueError as exc:
            print(f"warning: skipped {f}: {exc}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out or "results")
    path = out / "summary.json"
    if not path.exists():
        print(f"error: {path} not found; run sweep first", file=sys.stderr)
        return EXIT_FAILED
    summary = json.loads(path.read_text())
    print(f"{'scheme':<10} {'average %':>10} {'maximum %':>10}")
    for s, v in summary["loss_pct"].items():
        print(f"{s:<10} {float(v['average']):>10.3f} {float(v['maximum']):>10.3f}")
    prov = summary["provenance"]
    print(f"config {prov.get('config_hash')} seed {prov.get('seed')} "
          f"version {prov.get('version')}")
    return EXIT_FAILED if summary["failures"] else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--preset", choices=("paper", "desk"),
                        help="scenario grid, episode budget and MDP grids")
    common.add_argument("--schemes", help="comma-separated scheme names")
    common.add_argument("--out", help="output directory")
    common.add_argument("--cache", help=f"solution cache directory (default ${CACHE_ENV})")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="clipped-affine", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="solve optimal baselines by PI")
    s.add_argument("--family", default="bernoulli",
                   choices=("onepoint", "bernoulli", "exponential", "uniform"))
    s.add_argument("--nmcr", type=float, default=0.5)
    s.add_argument("--nsnr", type=float, default=10.0, help="NSNR in dB")
    s.add_argument("--channel", choices=("rayleigh", "deterministic"), default="rayleigh")
    s.add_argument("--lookahead", choices=LOOKAHEAD_MODES + ("all",), default="none")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("sweep", parents=[common], help="evaluate schemes over the scenario grid")
    s.set_defaults(func=cmd_sweep)
    s = sub.add_parser("plot", parents=[common], help="render OMF series as SVG")
    s.set_defaults(func=cmd_plot)
    s = sub.add_parser("report", parents=[common], help="print the loss summary of a sweep")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "<root>"
            print(f"config error at {loc}: {err['msg']}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
