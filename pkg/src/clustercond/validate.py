"""Validation of the approximate parent intensity by interaction statistics.

For each replicate the true parents, parents redrawn from the approximate
intensity, and the intensity itself are summarised by cumulative distance
statistics:

* H: parent to parent pairs,
* E: observed offspring to parents,
* Binner / Bouter: parents to the hole perimeter / to the outer perimeter.

Envelopes of the observed and simulated curves are then compared through
their area overlap (coverage rates tau1 and tau2).
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import fftconvolve
from scipy.spatial.distance import cdist, pdist

from .condint import CondParentField, build_rho_field, exposure_field, make_field
from .geom2d import Grid, Polyline, QuadratureSpec, Rect, Region, arc_lengths, boundary, coverage_raster
from .model import (
    ClusterModel,
    ObservationScheme,
    PointPattern,
    StepThinning,
    ThinningField,
    make_rng,
    sample_inhomogeneous_poisson,
    sample_thinned_cluster,
)

log = logging.getLogger(__name__)

KINDS = ("H", "E", "Binner", "Bouter")
SOURCES = ("empirical-observed", "empirical-simulated", "theoretical")
MIN_ENVELOPE_CURVES = 20
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True, eq=False)
class DistanceGrid:
    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.ndim != 1 or len(d) < 11:
            raise ValueError("a distance grid needs at least 11 points")
        if d[0] != 0.0 or np.any(np.diff(d) <= 0):
            raise ValueError("distances must start at 0 and strictly increase")
        object.__setattr__(self, "d", d)

    @classmethod
    def uniform(cls, dmax: float = 0.25, n: int = 64) -> "DistanceGrid":
        return cls(np.linspace(0.0, dmax, n))

    def __len__(self) -> int:
        return len(self.d)

    def __eq__(self, other) -> bool:
        return isinstance(other, DistanceGrid) and np.array_equal(self.d, other.d)

    @property
    def dmax(self) -> float:
        return float(self.d[-1])


@dataclass(frozen=True, eq=False)
class StatCurve:
    grid: DistanceGrid
    values: np.ndarray
    kind: str
    source: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown statistic {self.kind!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown curve source {self.source!r}")
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.d.shape:
            raise ValueError("curve values do not match the distance grid")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class EnvelopeSet:
    grid: DistanceGrid
    lower: np.ndarray
    upper: np.ndarray
    count: int
    kind: str = "H"

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def area(self) -> float:
        return float(np.trapezoid(self.width, self.grid.d))


# --------------------------------------------------------------------------
# empirical statistics


def _pts(pattern) -> np.ndarray:
    pts = pattern.points if isinstance(pattern, PointPattern) else pattern
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def _cumulative_counts(dist: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.sort(dist), d, side="right").astype(float)


def stat_H_emp(parents, grid: DistanceGrid) -> StatCurve:
    """Ordered parent pairs within distance d, per parent."""
    x = _pts(parents)
    if len(x) == 0:
        raise ValueError("H needs at least one parent")
    counts = 2.0 * _cumulative_counts(pdist(x), grid.d)
    return StatCurve(grid, counts / len(x), "H", "empirical-observed")


def stat_E_emp(offspring, parents, grid: DistanceGrid) -> StatCurve:
    """Offspring-parent pairs within distance d, per offspring."""
    x = _pts(offspring)
    y = _pts(parents)
    if len(x) == 0:
        raise ValueError("E needs at least one offspring point")
    if len(y) == 0:
        return StatCurve(grid, np.zeros(len(grid)), "E", "empirical-observed")
    counts = _cumulative_counts(cdist(x, y).ravel(), grid.d)
    return StatCurve(grid, counts / len(x), "E", "empirical-observed")


def stat_B_emp(parents, b_W: Polyline, grid: DistanceGrid, kind: str = "Binner") -> StatCurve:
    """Boundary length within distance d of each parent, summed, per unit boundary length."""
    y = _pts(parents)
    if len(y) == 0:
        return StatCurve(grid, np.zeros(len(grid)), kind, "empirical-observed")
    total = arc_lengths(b_W, y, grid.d).sum(axis=0)
    return StatCurve(grid, total / b_W.length, kind, "empirical-observed")


# --------------------------------------------------------------------------
# theoretical statistics
#
# Integrals of rho over discs are evaluated on the raster of rho: a
# cross-correlation over cell offsets, then for each offset the probability
# that two points in the offset cells lie within d. For two uniform cells the
# offset within a cell pair is a product of tent densities; a point mass
# deposited by cloud-in-cell against a uniform cell gives a uniform offset.


def _offset_nodes(kind: str, n: int = 12) -> Tuple[np.ndarray, np.ndarray]:
    t = -0.5 + (np.arange(n) + 0.5) / n
    w = np.full(n, 1.0 / n)
    if kind == "tent":
        t = 2 * t
        w = 1.0 - np.abs(t)
        w /= w.sum()
    TX, TY = np.meshgrid(t, t)
    WX, WY = np.meshgrid(w, w)
    return np.column_stack([TX.ravel(), TY.ravel()]), (WX * WY).ravel()


@lru_cache(maxsize=16)
def _lag_cdf(h: float, d: Tuple[float, ...], kind: str) -> Tuple[int, np.ndarray]:
    """``(m, M)``: M[lag, k] = P(distance <= d_k) for lags in [-m, m]^2, row-major."""
    d = np.asarray(d)
    m = int(math.ceil(d[-1] / h)) + 2
    off = np.arange(-m, m + 1)
    LX, LY = np.meshgrid(off, off)
    lags = np.column_stack([LX.ravel(), LY.ravel()]).astype(float)
    t, w = _offset_nodes(kind)
    nl, K = len(lags), len(d)
    M = np.zeros((nl, K + 1))
    for s in range(0, nl, 2048):
        block = lags[s : s + 2048]
        dist = h * np.hypot(block[:, None, 0] + t[None, :, 0], block[:, None, 1] + t[None, :, 1])
        idx = np.searchsorted(d, dist, side="left")
        rows = np.repeat(np.arange(len(block)), len(t))
        flat = rows * (K + 1) + idx.ravel()
        M[s : s + len(block)] = np.bincount(flat, np.tile(w, len(block)), len(block) * (K + 1)).reshape(-1, K + 1)
    return m, np.cumsum(M[:, :K], axis=1)


def _correlate(a: np.ndarray, b: np.ndarray, m: int) -> np.ndarray:
    """C[m + dy, m + dx] = sum_ij a[i, j] b[i + dy, j + dx] for |dx|, |dy| <= m."""
    full = fftconvolve(b, a[::-1, ::-1], mode="full")
    cy, cx = a.shape[0] - 1, a.shape[1] - 1
    out = np.zeros((2 * m + 1, 2 * m + 1))
    y0, y1 = max(cy - m, 0), min(cy + m + 1, full.shape[0])
    x0, x1 = max(cx - m, 0), min(cx + m + 1, full.shape[1])
    out[y0 - cy + m : y1 - cy + m, x0 - cx + m : x1 - cx + m] = full[y0:y1, x0:x1]
    return out


def _masked_rho(rho: CondParentField, S: Region) -> Tuple[Grid, np.ndarray]:
    grid = rho.grid.padded(1)
    vals = np.zeros(grid.shape)
    vals[1:-1, 1:-1] = rho.values
    return grid, vals * coverage_raster(S, grid)


def _disc_mass(points: np.ndarray, weights: np.ndarray, rho: CondParentField, S: Region, grid: DistanceGrid) -> np.ndarray:
    """sum_i w_i * integral of rho over b(points_i, d) intersected with S."""
    g, vals = _masked_rho(rho, S)
    m, M = _lag_cdf(g.h, tuple(grid.d), "uniform")
    a = g.splat(points, weights)
    C = _correlate(a, vals, m)
    return g.h**2 * (C.ravel() @ M)


def stat_H_theo(rho: CondParentField, S: Region, grid: DistanceGrid, q: Optional[QuadratureSpec] = None) -> StatCurve:
    g, vals = _masked_rho(rho, S)
    total = vals.sum() * g.h**2
    if not total > 0:
        raise ValueError("rho integrates to zero over S")
    m, M = _lag_cdf(g.h, tuple(grid.d), "tent")
    C = _correlate(vals, vals, m)
    return StatCurve(grid, g.h**4 * (C.ravel() @ M) / total, "H", "theoretical")


def stat_E_theo(offspring, rho: CondParentField, S: Region, grid: DistanceGrid, q: Optional[QuadratureSpec] = None) -> StatCurve:
    x = _pts(offspring)
    if len(x) == 0:
        raise ValueError("E needs at least one offspring point")
    vals = _disc_mass(x, np.ones(len(x)), rho, S, grid) / len(x)
    return StatCurve(grid, vals, "E", "theoretical")


def stat_B_theo(
    rho: CondParentField,
    b_W: Polyline,
    S: Region,
    grid: DistanceGrid,
    q: Optional[QuadratureSpec] = None,
    kind: str = "Binner",
) -> StatCurve:
    step = (q.h if q is not None else rho.grid.h) / 2
    pts, wts = b_W.samples(step)
    vals = _disc_mass(pts, wts, rho, S, grid) / b_W.length
    return StatCurve(grid, vals, kind, "theoretical")


# --------------------------------------------------------------------------
# envelopes and coverage


def envelopes(curves: Sequence[StatCurve], level: float = 0.95, min_curves: int = MIN_ENVELOPE_CURVES) -> EnvelopeSet:
    """Pointwise quantiles at (1 - level)/2 and (1 + level)/2, linear interpolation."""
    if len(curves) < min_curves:
        raise ValueError(f"envelopes need at least {min_curves} curves, got {len(curves)}")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    grid, kind = curves[0].grid, curves[0].kind
    if any(c.grid != grid or c.kind != kind for c in curves):
        raise ValueError("envelope curves must share kind and distance grid")
    return envelope_from_array(np.stack([c.values for c in curves]), grid, level, kind)


def envelope_from_array(values: np.ndarray, grid: DistanceGrid, level: float = 0.95, kind: str = "H") -> EnvelopeSet:
    lo, hi = np.quantile(values, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return EnvelopeSet(grid, lo, hi, len(values), kind)


def _overlap(A: EnvelopeSet, B: EnvelopeSet) -> np.ndarray:
    if A.grid != B.grid:
        raise ValueError("envelopes live on different distance grids")
    return np.maximum(0.0, np.minimum(A.upper, B.upper) - np.maximum(A.lower, B.lower))


def coverage_tau(A: EnvelopeSet, B: EnvelopeSet) -> Tuple[float, float]:
    """Overlap area of the two bands as a percentage of the area of A, and of B."""
    inter = float(np.trapezoid(_overlap(A, B), A.grid.d))
    if not (A.area > 0 and B.area > 0):
        raise ValueError("envelope band has zero area")
    return 100.0 * inter / A.area, 100.0 * inter / B.area


def coverage_curves(A: EnvelopeSet, B: EnvelopeSet) -> Tuple[np.ndarray, np.ndarray]:
    """Per-distance overlap ratios; NaN where a band has zero width."""
    inter = _overlap(A, B)
    with np.errstate(invalid="ignore", divide="ignore"):
        t1 = np.where(A.width > 0, 100.0 * inter / A.width, np.nan)
        t2 = np.where(B.width > 0, 100.0 * inter / B.width, np.nan)
    return t1, t2


# --------------------------------------------------------------------------
# experiment


@dataclass(frozen=True)
class ExperimentConfig:
    kappa: float = 50.0
    mu: float = 40.0
    r: float = 0.09
    thinning: ThinningField = field(default_factory=StepThinning)
    S: Rect = Rect(0.0, 0.0, 1.0, 1.0)
    hole: Rect = Rect(0.35, 0.35, 0.65, 0.65)
    N: int = 250
    n_sim: int = 100
    M: Optional[int] = None
    quad_h: Optional[float] = None
    seed: int = 0
    distances: Tuple[float, ...] = tuple(np.linspace(0.0, 0.25, 64))
    level: float = 0.95
    field_h: float = 0.004
    supersample: int = 4
    truth: str = "parents"
    cell: int = 0

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if self.n_sim < 1:
            raise ValueError("n_sim must be at least 1")
        if self.truth not in ("parents", "approx"):
            raise ValueError("truth must be 'parents' or 'approx'")
        if not (self.field_h > 0 and self.supersample >= 1):
            raise ValueError("field_h must be positive and supersample at least 1")
        DistanceGrid(np.asarray(self.distances))

    @property
    def model(self) -> ClusterModel:
        return ClusterModel.matern(self.kappa, self.mu, self.r)

    @property
    def scheme(self) -> ObservationScheme:
        return ObservationScheme(self.S, self.hole, self.r)

    @property
    def grid(self) -> DistanceGrid:
        return DistanceGrid(np.asarray(self.distances))


@dataclass
class ReplicateResult:
    rep: int
    observed: Dict[str, np.ndarray]
    theoretical: Dict[str, np.ndarray]
    simulated: Dict[str, np.ndarray]  # (n_sim, len(grid)) per kind
    counts: Tuple[int, int]  # parents in S, observed offspring


@dataclass
class CoverageReport:
    config: ExperimentConfig
    grid: DistanceGrid
    tau: Dict[str, Tuple[float, float]]
    tau_curves: Dict[str, Tuple[np.ndarray, np.ndarray]]
    envelopes: Dict[str, Dict[str, EnvelopeSet]]
    replicates: List[ReplicateResult]
    failures: List[Tuple[int, str]]


def _field_grids(cfg: ExperimentConfig) -> Tuple[Grid, Grid]:
    S = cfg.S
    n = max(1, round((S.xmax - S.xmin) / cfg.field_h))
    h = (S.xmax - S.xmin) / n
    ny = max(1, round((S.ymax - S.ymin) / h))
    coarse = Grid(S.xmin, S.ymin, h, n, ny)
    k = cfg.supersample
    fine = Grid(S.xmin, S.ymin, h / k, n * k, ny * k)
    return coarse, fine


_J_CACHE: Dict[tuple, np.ndarray] = {}


def validation_field(obs, cfg: ExperimentConfig) -> CondParentField:
    """Approximate parent intensity over S, as cell averages on the statistics raster."""
    coarse, fine = _field_grids(cfg)
    key = (cfg.kappa, cfg.mu, cfg.r, cfg.thinning, cfg.S, cfg.hole, fine)
    if key not in _J_CACHE:
        _J_CACHE.clear()
        _J_CACHE[key] = exposure_field(cfg.model, cfg.thinning, cfg.scheme.W, fine)
    rho = build_rho_field(obs, cfg.model, cfg.thinning, cfg.scheme, grid=fine, J=_J_CACHE[key])
    k = cfg.supersample
    vals = rho.values.reshape(coarse.ny, k, coarse.nx, k).mean(axis=(1, 3))
    return make_field(coarse, vals)


def _empirical(parents: np.ndarray, offspring: np.ndarray, inner: Polyline, outer: Polyline, grid) -> Dict[str, np.ndarray]:
    return {
        "H": stat_H_emp(parents, grid).values,
        "E": stat_E_emp(offspring, parents, grid).values,
        "Binner": stat_B_emp(parents, inner, grid).values,
        "Bouter": stat_B_emp(parents, outer, grid, "Bouter").values,
    }


def run_replicate(cfg: ExperimentConfig, rep: int) -> ReplicateResult:
    """One replicate; depends only on (seed, cell, rep)."""
    rng = make_rng(cfg.seed, cfg.cell, rep)
    scheme, grid = cfg.scheme, cfg.grid
    inner, outer = boundary(scheme.W, "inner"), boundary(scheme.W, "outer")
    parents, _, thinned = sample_thinned_cluster(cfg.model, cfg.thinning, scheme, rng)
    obs = thinned.restrict(scheme.W).points
    rho = validation_field(obs, cfg)
    if cfg.truth == "parents":
        psi = parents.restrict(cfg.S).points
    else:
        psi = sample_inhomogeneous_poisson(rho.value_at, rho.bound, cfg.S, rng).points
    observed = _empirical(psi, obs, inner, outer, grid)
    theoretical = {
        "H": stat_H_theo(rho, cfg.S, grid).values,
        "E": stat_E_theo(obs, rho, cfg.S, grid).values,
        "Binner": stat_B_theo(rho, inner, cfg.S, grid).values,
        "Bouter": stat_B_theo(rho, outer, cfg.S, grid).values,
    }
    sims = {k: np.empty((cfg.n_sim, len(grid))) for k in KINDS}
    for j in range(cfg.n_sim):
        sim = sample_inhomogeneous_poisson(rho.value_at, rho.bound, cfg.S, rng).points
        for k, v in _empirical(sim, obs, inner, outer, grid).items():
            sims[k][j] = v
    return ReplicateResult(rep, observed, theoretical, sims, (len(psi), len(obs)))


def _safe_replicate(args) -> Tuple[int, Optional[ReplicateResult], Optional[str]]:
    cfg, rep = args
    try:
        return rep, run_replicate(cfg, rep), None
    except Exception as exc:  # recorded per replicate; the caller decides
        return rep, None, f"{type(exc).__name__}: {exc}"


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> CoverageReport:
    """All replicates of one (thinning, r) cell, then envelopes and coverage rates.

    Results are reduced in replicate order, so the output does not depend on
    ``workers``. Up to 5% of replicates may fail; they are recorded and skipped.
    """
    jobs = [(cfg, rep) for rep in range(cfg.N)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_safe_replicate, jobs, chunksize=max(1, cfg.N // (4 * workers))))
    else:
        out = [_safe_replicate(j) for j in jobs]
    failures = [(rep, msg) for rep, res, msg in out if res is None]
    results = [res for _, res, _ in out if res is not None]
    for rep, msg in failures:
        log.warning("replicate %d failed: %s", rep, msg)
    if len(failures) >= MAX_FAILURE_RATE * cfg.N:
        detail = "; ".join(f"replicate {rep}: {msg}" for rep, msg in failures[:5])
        raise RuntimeError(f"{len(failures)} of {cfg.N} replicates failed ({detail})")
    return summarize(cfg, results, failures)


def summarize(cfg: ExperimentConfig, results: List[ReplicateResult], failures=()) -> CoverageReport:
    grid = cfg.grid
    env: Dict[str, Dict[str, EnvelopeSet]] = {}
    tau: Dict[str, Tuple[float, float]] = {}
    curves: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for k in KINDS:
        fam = {
            "observed": np.stack([r.observed[k] for r in results]),
            "simulated": np.concatenate([r.simulated[k] for r in results]),
            "theoretical": np.stack([r.theoretical[k] for r in results]),
        }
        if min(len(v) for v in fam.values()) < MIN_ENVELOPE_CURVES:
            nan = np.full(len(grid), np.nan)
            tau[k], curves[k] = (math.nan, math.nan), (nan, nan)
            continue
        env[k] = {name: envelope_from_array(v, grid, cfg.level, k) for name, v in fam.items()}
        A, B = env[k]["observed"], env[k]["simulated"]
        tau[k] = coverage_tau(A, B)
        curves[k] = coverage_curves(A, B)
    return CoverageReport(cfg, grid, tau, curves, env, list(results), list(failures))


# --------------------------------------------------------------------------
# output


def _f(x: float) -> str:
    return format(float(x), ".17g")


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_report(report: CoverageReport, outdir) -> List[Path]:
    """Write curves.csv, envelopes.csv, coverage.csv and tau_curves.csv."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    d = report.grid.d
    rows = []
    for res in report.replicates:
        for k in KINDS:
            fams = (
                ("empirical-observed", res.observed[k]),
                ("empirical-simulated-mean", res.simulated[k].mean(axis=0)),
                ("theoretical", res.theoretical[k]),
            )
            for src, vals in fams:
                rows.extend((res.rep, k, src, _f(di), _f(v)) for di, v in zip(d, vals))
    paths = [out / "curves.csv", out / "envelopes.csv", out / "coverage.csv", out / "tau_curves.csv"]
    _write_rows(paths[0], ("replicate", "kind", "source", "d", "value"), rows)
    rows = []
    for k, fams in report.envelopes.items():
        for name, e in fams.items():
            rows.extend((k, name, _f(di), _f(lo), _f(hi)) for di, lo, hi in zip(d, e.lower, e.upper))
    _write_rows(paths[1], ("kind", "source", "d", "lower", "upper"), rows)
    _write_rows(paths[2], ("kind", "tau1", "tau2"), [(k, _f(t1), _f(t2)) for k, (t1, t2) in report.tau.items()])
    rows = []
    for k, (t1, t2) in report.tau_curves.items():
        rows.extend((k, _f(di), _f(a), _f(b)) for di, a, b in zip(d, t1, t2))
    _write_rows(paths[3], ("kind", "d", "tau1", "tau2"), rows)
    return paths
