"""Command line entry point: ``clustercond {simulate,condint,validate,reproduce-table1}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .condint import (
    exact_rho,
    build_rho_field,
    constant_field,
    importance_oracle,
    lambda_field,
    MAX_EXACT_POINTS,
)
from .config import ConfigError, RunConfig, load, reference_grid
from .geom2d import Grid, QuadratureSpec
from .model import ClusterModel, ObservationScheme, read_pattern_csv, sample_thinned_cluster, write_patterns_csv
from .svg import envelope_plot, pattern_plot
from .validate import KINDS, default_workers, run_experiment, write_report

log = logging.getLogger("clustercond")


def _f(x) -> str:
    return format(float(x), ".17g")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: RunConfig, command: str, files: List[Path], started: float) -> Path:
    files = sorted(set(files))
    manifest = {
        "run_id": f"{command}-{cfg.digest[:12]}-{cfg.seed}",
        "command": command,
        "config_hash": cfg.digest,
        "seed": cfg.seed,
        "artifacts": [{"path": str(p.relative_to(out)), "sha256": _sha256(p)} for p in files],
        "wall_clock_s": round(time.time() - started, 3),
        "version": __version__,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "config.yaml").write_text(cfg.dump())
    return path


def _scheme(cfg: RunConfig) -> ObservationScheme:
    S, hole = cfg.scheme_rects()
    return ObservationScheme(S, hole, cfg.model.r)


def _model(cfg: RunConfig) -> ClusterModel:
    return ClusterModel.matern(cfg.model.kappa, cfg.model.mu, cfg.model.r)


def _write_raster(path: Path, grid: Grid, columns: dict, mask=None) -> None:
    _write_points(path, grid.points(), columns, mask)


def _write_points(path: Path, pts: np.ndarray, columns: dict, mask=None) -> None:
    keep = np.ones(len(pts), bool) if mask is None else mask.ravel()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", *columns])
        cols = [np.asarray(v).ravel() for v in columns.values()]
        for i in np.flatnonzero(keep):
            w.writerow([_f(pts[i, 0]), _f(pts[i, 1]), *(_f(c[i]) for c in cols)])


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out: Path) -> List[Path]:
    scheme, model = _scheme(cfg), _model(cfg)
    parents, offspring, thinned = sample_thinned_cluster(model, cfg.thinning.build(), scheme, cfg.seed)
    observed = thinned.restrict(scheme.W)
    files = []
    for pat, name in ((parents, "parents"), (offspring, "offspring"), (thinned, "thinned"), (observed, "observed")):
        path = out / f"{name}.csv"
        write_patterns_csv(path, [pat])
        files.append(path)
    log.info(
        "parents %d, offspring %d, thinned %d, observed in W %d",
        len(parents), len(offspring), len(thinned), len(observed),
    )
    svg = out / "simulate.svg"
    pattern_plot(
        svg, scheme.S, scheme.hole,
        [(parents.points, "red"), (offspring.points, "lightgrey"), (observed.points, "black")],
    )
    return files + [svg]


def cmd_condint(cfg: RunConfig, out: Path, observed: Optional[str], oracle: bool, quad_h: Optional[float], debug_rho_kappa: bool) -> List[Path]:
    scheme, model = _scheme(cfg), _model(cfg)
    p = cfg.thinning.build()
    path = observed or cfg.condint.observed
    if path is None:
        raise ConfigError("condint.observed: no observed pattern file given (use --observed)")
    role_filter = None
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    if "role" in header:
        role_filter = "thinned"
    obs = read_pattern_csv(path, scheme.W, role_filter).points
    outside = ~scheme.W.contains(obs) if len(obs) else np.zeros(0, bool)
    if outside.any():
        listing = ", ".join(f"({x:.6g}, {y:.6g})" for x, y in obs[outside][:20])
        raise ValueError(f"{int(outside.sum())} observed points lie outside W: {listing}")
    h = quad_h or model.r / 50
    grid = Grid.covering(scheme.parent_window.bbox(), h, pad=2)
    rho = constant_field(grid, model.kappa) if debug_rho_kappa else build_rho_field(obs, model, p, scheme, grid)
    lam = lambda_field(rho, model, p, scheme, scheme.hole)
    files = []
    # report every k-th working cell so written values sit exactly at their coordinates
    k = max(1, round(cfg.condint.grid_h / h))
    sub = (slice(k // 2, None, k), slice(k // 2, None, k))
    pts = grid.points().reshape(grid.ny, grid.nx, 2)[sub].reshape(-1, 2)
    rvals = rho.values[sub].ravel()
    lvals = lam.values[sub].ravel()
    files.append(out / "rho.csv")
    _write_points(files[-1], pts, {"rho": rvals}, scheme.parent_window.contains(pts))
    files.append(out / "lambda.csv")
    keep = np.isfinite(lvals)
    _write_points(files[-1], pts, {"lambda": lvals}, keep)
    if oracle:
        ogrid = Grid.covering(scheme.parent_window.bbox(), cfg.oracle.grid_h)
        q = QuadratureSpec(h)
        est, se = importance_oracle(ogrid.points(), obs, model, p, scheme, M=cfg.oracle.M, seed=cfg.seed, q=q)
        cols = {"rho": est, "se": se}
        if len(obs) <= MAX_EXACT_POINTS:
            cols["exact"] = exact_rho(ogrid.points(), obs, model, scheme.W, q=q, p=p)
        files.append(out / "oracle.csv")
        _write_raster(files[-1], ogrid, cols)
    log.info("observed %d points; lambda mean over the hole %.6g", len(obs), float(np.nanmean(lvals[keep])) if keep.any() else float("nan"))
    return files


def cmd_validate(cfg: RunConfig, out: Path, workers: int) -> List[Path]:
    files: List[Path] = []
    rows = []
    for i, cell in enumerate(cfg.expand_cells()):
        ecfg = cfg.experiment_config(cell, i)
        name = f"cell{i}_{cell.thinning.variant}_r{cell.r:g}"
        log.info("cell %s: N=%d, n_sim=%d", name, ecfg.N, ecfg.n_sim)
        report = run_experiment(ecfg, workers=workers)
        cdir = out / name
        files += write_report(report, cdir)
        for k in KINDS:
            if k in report.envelopes:
                svg = cdir / f"envelope_{k}.svg"
                bands = {n: (e.lower, e.upper) for n, e in report.envelopes[k].items()}
                envelope_plot(svg, report.grid.d, bands, report.tau_curves[k], title=k)
                files.append(svg)
        taus = [v for k in KINDS for v in report.tau[k]]
        rows.append([cell.thinning.variant, _f(cell.r), *(_f(t) for t in taus)])
        log.info("cell %s: %s", name, ", ".join(f"{k} {a:.2f}/{b:.2f}" for k, (a, b) in report.tau.items()))
    header = ["thinning", "r"] + [f"{t}_{k}" for k in KINDS for t in ("tau1", "tau2")]
    table = out / "coverage.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return files + [table]


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--workers", type=int, default=None, help="worker processes (default: available CPUs)")
    common.add_argument("--oracle", action="store_true", help="also run the Monte Carlo oracle")
    common.add_argument("--quad-h", type=float, default=None, help="quadrature cell size")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="clustercond", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate one thinned cluster realisation")
    c = sub.add_parser("condint", parents=[common], help="conditional parent and offspring intensity rasters")
    c.add_argument("--observed", help="CSV of observed points (x,y[,role])")
    c.add_argument("--debug-rho-kappa", action="store_true", help="replace rho by the constant kappa")
    sub.add_parser("validate", parents=[common], help="run the validation experiment for the configured cells")
    sub.add_parser("reproduce-table1", parents=[common], help="validation on the reference grid of six cells")
    return parser


def _resolve(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be non-negative")
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.quad_h is not None:
        if not args.quad_h > 0:
            raise ConfigError("--quad-h: must be positive")
        cfg = replace(cfg, experiment=replace(cfg.experiment, quad_h=args.quad_h))
    if args.oracle:
        cfg = replace(cfg, oracle=replace(cfg.oracle, enabled=True))
    if args.command == "reproduce-table1":
        cfg = reference_grid(cfg)
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        cfg = _resolve(args)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers: must be at least 1")
        if args.command in ("validate", "reproduce-table1"):
            cfg.expand_cells()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            files = cmd_simulate(cfg, out)
        elif args.command == "condint":
            files = cmd_condint(cfg, out, args.observed, cfg.oracle.enabled, cfg.experiment.quad_h, args.debug_rho_kappa)
        else:
            files = cmd_validate(cfg, out, args.workers or default_workers())
        write_manifest(out, cfg, args.command, files, started)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
