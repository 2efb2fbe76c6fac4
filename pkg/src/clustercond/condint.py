"""Conditional parent and offspring intensities given an observed pattern.

Notation: ``J(y)`` is the exposure of a parent at ``y``, the probability that
one of its offspring is retained inside the observation window W::

    J(y) = integral over W of p(z) k(y - z) dz

The approximate parent intensity is

    rho(y) = c(y) / (mu p(y)) * sum_x k(x - y) + kappa * exp(-mu J(y)),
    c(y)   = p(y) (1 - exp(-mu J(y))) / J(y),

where c(y) makes E[rho(y)] = kappa: the observed pattern has intensity
kappa mu p on W, so E[sum_x k(x - y)] = kappa mu J(y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

from .geom2d import (
    Difference,
    Disc,
    Grid,
    Intersection,
    QuadratureSpec,
    Region,
    as_points,
    coverage_raster,
    disc_kernel_raster,
    disc_region_measure,
    integrate,
    measure,
)
from .model import (
    ClusterModel,
    ConstantThinning,
    ObservationScheme,
    PointPattern,
    SeedLike,
    ThinningField,
    make_rng,
)

MAX_EXACT_POINTS = 8


def _obs_points(obs) -> np.ndarray:
    if isinstance(obs, PointPattern):
        return obs.points
    if obs is None:
        return np.zeros((0, 2))
    a = np.asarray(obs, dtype=float)
    return a.reshape(-1, 2)


def _default_q(model: ClusterModel, q: Optional[QuadratureSpec]) -> QuadratureSpec:
    return q if q is not None else QuadratureSpec.for_range(model.r)


def one_minus_exp_ratio(t) -> np.ndarray:
    """(1 - exp(-t)) / t with its limit 1 at t = 0."""
    t = np.asarray(t, dtype=float)
    safe = np.where(t > 1e-300, t, 1.0)
    return np.where(t > 1e-300, -np.expm1(-safe) / safe, 1.0)


def kernel_density(model: ClusterModel, u) -> float | np.ndarray:
    val = model.kernel.density(u)
    return float(val) if np.ndim(val) == 0 else val


# --------------------------------------------------------------------------
# pointwise evaluators


@lru_cache(maxsize=64)
def _disc_lattice_area(r: float, h: float) -> float:
    return measure(Disc(0.0, 0.0, r), QuadratureSpec(h, origin=(-r, -r)))


@lru_cache(maxsize=65536)
def _exposure_cached(y: Tuple[float, float], r: float, p: ThinningField, W: Region, q: QuadratureSpec) -> float:
    disc = Disc(y[0], y[1], r)
    # lattice tied to the disc so that a disc inside W has exposure exactly 1
    qd = q if q.origin is not None else QuadratureSpec(q.h, origin=(y[0] - r, y[1] - r))
    total = 0.0
    for piece, fn in p.pieces():
        region = Intersection(W, disc)
        if piece is not None:
            region = Intersection(region, piece)
        total += integrate(fn, region, qd)
    return min(max(total / _disc_lattice_area(r, q.h), 0.0), 1.0)


def exposure(y, model: ClusterModel, p: ThinningField, W: Region, q: Optional[QuadratureSpec] = None) -> float:
    """Kernel mass of a parent at ``y`` that lands in W and survives thinning."""
    y = as_points(y)[0]
    return _exposure_cached((float(y[0]), float(y[1])), model.r, p, W, _default_q(model, q))


def normalizer_c(y, model: ClusterModel, p: ThinningField, W: Region, q: Optional[QuadratureSpec] = None) -> float:
    J = exposure(y, model, p, W, q)
    py = p.value(y)
    return float(py * model.mu * one_minus_exp_ratio(model.mu * J))


def rho_from_parts(count, J, model: ClusterModel) -> np.ndarray:
    """Approximate parent intensity from neighbour counts within r and exposures.

    The ``p(y)`` in c(y) cancels the one in the denominator, so the value
    does not depend on p at ``y`` itself.
    """
    t = model.mu * np.asarray(J, dtype=float)
    return one_minus_exp_ratio(t) * np.asarray(count) * model.kernel.height + model.kappa * np.exp(-t)


def rho_approx(
    y,
    obs,
    model: ClusterModel,
    p: ThinningField,
    scheme: ObservationScheme,
    q: Optional[QuadratureSpec] = None,
) -> float | np.ndarray:
    ys = as_points(y)
    x = _obs_points(obs)
    J = np.array([exposure(yy, model, p, scheme.W, q) for yy in ys])
    if len(x):
        d2 = ((ys[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        count = (d2 <= model.r**2).sum(axis=1)
    else:
        count = np.zeros(len(ys))
    val = rho_from_parts(count, J, model)
    return float(val[0]) if np.ndim(y) == 1 else val


# --------------------------------------------------------------------------
# raster fields


def thinned_window_raster(p: ThinningField, W: Region, grid: Grid) -> np.ndarray:
    """Cell averages of p(z) 1_W(z)."""
    centers = grid.points()
    out = np.zeros(grid.shape)
    for piece, fn in p.pieces():
        region = W if piece is None else Intersection(W, piece)
        cov = coverage_raster(region, grid)
        nz = cov > 0
        vals = np.zeros(grid.shape)
        vals[nz] = fn(centers[nz.ravel()])
        out += cov * vals
    return out


def exposure_field(model: ClusterModel, p: ThinningField, W: Region, grid: Grid) -> np.ndarray:
    """J at every cell centre of ``grid`` by FFT convolution of rasters."""
    K = disc_kernel_raster(model.r, grid.h)
    m = K.shape[0] // 2
    P = thinned_window_raster(p, W, grid.padded(m))
    J = fftconvolve(P, K, mode="valid")
    return np.clip(J, 0.0, 1.0)


def count_field(points: np.ndarray, radius: float, grid: Grid) -> np.ndarray:
    """Number of ``points`` within ``radius`` (closed) of every cell centre."""
    out = np.zeros((grid.ny, grid.nx + 1))
    if len(points) == 0:
        return out[:, :-1]
    h = grid.h
    r2 = radius * radius * (1 + 1e-12)
    m = math.ceil(radius / h) + 1
    pts = np.asarray(points, dtype=float)
    cy = np.floor((pts[:, 1] - grid.y0) / h).astype(np.int64)
    iy = cy[:, None] + np.arange(-m, m + 1)[None, :]
    dy = grid.y0 + (iy + 0.5) * h - pts[:, 1:]
    half = np.sqrt(np.maximum(r2 - dy * dy, 0.0))
    # centres x0 + (ix + 1/2) h within [px - half, px + half], one interval per row
    lo = np.ceil((pts[:, :1] - half - grid.x0) / h - 0.5).astype(np.int64)
    hi = np.floor((pts[:, :1] + half - grid.x0) / h - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, grid.nx - 1)
    ok = (dy * dy <= r2) & (iy >= 0) & (iy < grid.ny) & (lo <= hi)
    np.add.at(out, (iy[ok], lo[ok]), 1.0)
    np.add.at(out, (iy[ok], hi[ok] + 1), -1.0)
    return np.cumsum(out, axis=1)[:, :-1]


@dataclass(frozen=True, eq=False)
class CondParentField:
    """Piecewise-constant parent intensity on the cells of ``grid``."""

    grid: Grid
    values: np.ndarray
    bound: float
    provenance: str = "approx"

    def value_at(self, pts) -> np.ndarray:
        pts = as_points(pts)
        iy, ix, ok = self.grid.cell_index(pts)
        if not ok.all():
            raise ValueError("point outside the conditional parent field")
        return self.values[iy, ix]

    def total(self, cover: Optional[np.ndarray] = None) -> float:
        w = self.values if cover is None else self.values * cover
        return float(w.sum() * self.grid.h**2)


def make_field(grid: Grid, values: np.ndarray, provenance: str = "approx") -> CondParentField:
    vmax = float(values.max()) if values.size else 0.0
    return CondParentField(grid, values, 1.05 * vmax if vmax > 0 else 1.0, provenance)


def build_rho_field(
    obs,
    model: ClusterModel,
    p: ThinningField,
    scheme: ObservationScheme,
    grid: Optional[Grid] = None,
    J: Optional[np.ndarray] = None,
) -> CondParentField:
    """Approximate parent intensity on ``grid`` (default: S dilated by r, cell r/50)."""
    if grid is None:
        grid = Grid.covering(scheme.parent_window.bbox(), model.r / 50)
    if J is None:
        J = exposure_field(model, p, scheme.W, grid)
    count = count_field(_obs_points(obs), model.r, grid)
    return make_field(grid, rho_from_parts(count, J, model))


def constant_field(grid: Grid, value: float, provenance: str = "approx") -> CondParentField:
    return make_field(grid, np.full(grid.shape, float(value)), provenance)


@dataclass(frozen=True, eq=False)
class CondIntensityField:
    """Conditional offspring intensity on grid cells; NaN outside the target region."""

    grid: Grid
    values: np.ndarray


def _aligned_q(rho: CondParentField) -> QuadratureSpec:
    return QuadratureSpec(rho.grid.h, origin=(rho.grid.x0, rho.grid.y0))


def _p_at(p: ThinningField, x_o) -> float:
    px = p.value(x_o)
    if not math.isfinite(px):
        raise ValueError(f"thinning probability undefined at {tuple(as_points(x_o)[0])}")
    return px


def lambda_cond(
    x_o,
    obs,
    rho: Optional[CondParentField],
    model: ClusterModel,
    p: ThinningField,
    scheme: ObservationScheme,
    q: Optional[QuadratureSpec] = None,
) -> float:
    """Conditional intensity of the thinned process at ``x_o`` given the observation.

    Generic kernel route: mu p(x_o) [ int_D k(y - x_o) rho(y) dy
    + kappa int_{b(x_o, r) \\ D} k(y - x_o) dy ] with D = W dilated by r.
    ``rho`` defaults to the approximate field built from ``obs``.
    """
    x_o = as_points(x_o)[0]
    px = _p_at(p, x_o)
    if px == 0:
        return 0.0
    if rho is None:
        bb = model.kernel.support(x_o).bbox()
        rho = build_rho_field(obs, model, p, scheme, Grid.covering(bb, model.r / 50, pad=2))
    q = q or _aligned_q(rho)
    b = model.kernel.support(x_o)
    D = scheme.support

    def k(y):
        return model.kernel.density(y - x_o)

    inside = integrate(lambda y: k(y) * rho.value_at(y), Intersection(D, b), q)
    outside = integrate(k, Difference(b, D), q)
    return model.mu * px * (inside + model.kappa * outside)


def lambda_cond_matern(
    x_o,
    rho: CondParentField,
    model: ClusterModel,
    p: ThinningField,
    scheme: ObservationScheme,
    q: Optional[QuadratureSpec] = None,
) -> float:
    """Uniform-disc specialisation: disc average of rho plus the uncovered disc area."""
    x_o = as_points(x_o)[0]
    px = _p_at(p, x_o)
    if px == 0:
        return 0.0
    q = q or _aligned_q(rho)
    b = model.kernel.support(x_o)
    D = scheme.support
    inner = integrate(rho.value_at, Intersection(D, b), q)
    uncovered = b.area - disc_region_measure(b, D, q)
    return model.mu * px * model.kernel.height * (inner + model.kappa * uncovered)


def lambda_field(
    rho: CondParentField,
    model: ClusterModel,
    p: ThinningField,
    scheme: ObservationScheme,
    target: Region,
) -> CondIntensityField:
    """Conditional intensity at the cell centres of ``rho.grid`` lying in ``target``.

    Outside W dilated by r the parent intensity is the prior kappa, so a
    single convolution of the extended field with the kernel suffices.
    """
    grid = rho.grid
    cov = coverage_raster(scheme.support, grid)
    ext = rho.values * cov + model.kappa * (1.0 - cov)
    K = disc_kernel_raster(model.r, grid.h)
    conv = fftconvolve(ext, K, mode="same")
    centers = grid.points()
    inside = target.contains(centers).reshape(grid.shape)
    m = K.shape[0] // 2
    valid = np.zeros(grid.shape, bool)
    valid[m : grid.ny - m, m : grid.nx - m] = True
    if np.any(inside & ~valid):
        raise ValueError("parent field does not cover the kernel range around the target")
    out = np.full(grid.shape, np.nan)
    pv = p(centers[inside.ravel()])
    out[inside] = model.mu * pv * conv[inside]
    return CondIntensityField(grid, out)


# --------------------------------------------------------------------------
# exact conditional parent intensity (partition formula)


def set_partitions(n: int) -> Iterator[List[int]]:
    """All set partitions of {0..n-1}; each block is a bitmask."""
    blocks: List[int] = []

    def rec(i: int) -> Iterator[List[int]]:
        if i == n:
            yield list(blocks)
            return
        bit = 1 << i
        for j in range(len(blocks)):
            blocks[j] |= bit
            yield from rec(i + 1)
            blocks[j] &= ~bit
        blocks.append(bit)
        yield from rec(i + 1)
        blocks.pop()

    yield from rec(0)


def partition_vector(mask: int, n: int) -> Tuple[int, ...]:
    """Binary vector of a block; the last coordinate is the lowest bit, so
    masks 1, 2, ..., 2**n - 1 list (0,..,0,1), (0,..,1,0), ..., (1,..,1)."""
    return tuple((mask >> (n - 1 - l)) & 1 for l in range(n))


def _block_members(mask: int, n: int) -> List[int]:
    return [l for l in range(n) if mask >> l & 1]


def _exposure_interpolator(model, p, W, centers: np.ndarray, h: float) -> RegularGridInterpolator:
    lo = centers.min(axis=0) - model.r
    hi = centers.max(axis=0) + model.r
    grid = Grid.covering((lo[0], lo[1], hi[0], hi[1]), h, pad=2)
    J = exposure_field(model, p, W, grid)
    return RegularGridInterpolator((grid.ys, grid.xs), J, bounds_error=False, fill_value=None)


def _interp_xy(interp: RegularGridInterpolator, pts: np.ndarray) -> np.ndarray:
    return np.clip(interp(pts[:, ::-1]), 0.0, 1.0)


def block_integrals(
    x: np.ndarray,
    model: ClusterModel,
    p: ThinningField,
    W: Region,
    q: QuadratureSpec,
) -> np.ndarray:
    """S(B) = kappa int G^(|B|)(1 - J(z)) prod_{l in B} p(x_l) k(x_l - z) dz for every block mask."""
    n = len(x)
    S = np.zeros(1 << n)
    if n == 0:
        return S
    interp = _exposure_interpolator(model, p, W, x, q.h)
    px = p(x)
    H = model.kernel.height
    for mask in range(1, 1 << n):
        members = _block_members(mask, n)
        region: Region = Disc(x[members[0], 0], x[members[0], 1], model.r)
        for l in members[1:]:
            region = Intersection(region, Disc(x[l, 0], x[l, 1], model.r))
        m = len(members)
        const = model.kappa * np.prod(px[members]) * H**m
        S[mask] = const * integrate(lambda z: model.pgf(1.0 - _interp_xy(interp, z), m), region, q)
    return S


def exact_rho(
    y,
    obs,
    model: ClusterModel,
    W: Region,
    q: Optional[QuadratureSpec] = None,
    p: Optional[ThinningField] = None,
) -> float | np.ndarray:
    """Exact conditional parent intensity for at most eight observed points.

    Each set partition of the observations assigns every block to one parent.
    With S(B) the weight of a parent owning exactly block B and
    T_y(B) = kappa G^(|B|)(1 - J(y)) prod_{l in B} p(x_l) k(x_l - y)::

        rho(y) = kappa G(1 - J(y))
               + sum_pi sum_{B in pi} T_y(B) prod_{B' in pi, B' != B} S(B') / Z
        Z      = sum_pi prod_{B in pi} S(B)
    """
    p = p or ConstantThinning(1.0)
    q = _default_q(model, q)
    ys = as_points(y)
    x = _obs_points(obs)
    n = len(x)
    if n > MAX_EXACT_POINTS:
        raise ValueError(f"exact evaluation limited to {MAX_EXACT_POINTS} points, got {n}")
    J = np.array([exposure(yy, model, p, W, q) for yy in ys])
    lead = model.kappa * model.pgf(1.0 - J, 0)
    if n == 0:
        return float(lead[0]) if np.ndim(y) == 1 else lead
    S = block_integrals(x, model, p, W, q)
    kmat = p(x)[None, :] * model.kernel.density(ys[:, None, :] - x[None, :, :])
    T = np.zeros((len(ys), 1 << n))
    for mask in range(1, 1 << n):
        members = _block_members(mask, n)
        T[:, mask] = model.kappa * model.pgf(1.0 - J, len(members)) * np.prod(kmat[:, members], axis=1)
    Z = 0.0
    acc = np.zeros(len(ys))
    for blocks in set_partitions(n):
        sb = S[blocks]
        Z += float(np.prod(sb))
        for j, B in enumerate(blocks):
            acc += T[:, B] * np.prod(np.delete(sb, j))
    if Z <= 0:
        raise ValueError("observed pattern has zero likelihood under the model")
    val = lead + acc / Z
    return float(val[0]) if np.ndim(y) == 1 else val


# --------------------------------------------------------------------------
# Monte Carlo oracle


def importance_oracle(
    y_grid,
    obs,
    model: ClusterModel,
    p: ThinningField,
    scheme: ObservationScheme,
    M: int = 50_000,
    seed: SeedLike = 0,
    q: Optional[QuadratureSpec] = None,
    batch: int = 5000,
) -> Tuple[np.ndarray, np.ndarray]:
    """Monte Carlo estimate of the conditional parent intensity with standard errors.

    Uses the Palm identity for Poisson parents,
    ``rho(y) = kappa E[L(Psi + y)] / E[L(Psi)]`` with L the likelihood of the
    observation given parents Psi. The factor exp(-mu sum J) of L is absorbed
    by drawing Psi from the prior thinned with retention exp(-mu J), which
    leaves weights prod_i Lambda(x_i). Only parents within r of an
    observation affect those weights, so only that area is sampled.
    """
    if M < 1000:
        raise ValueError("the oracle needs at least 1000 samples")
    q = _default_q(model, q)
    ys = as_points(y_grid)
    x = _obs_points(obs)
    n = len(x)
    W = scheme.W
    J = np.array([exposure(yy, model, p, W, q) for yy in ys])
    base = model.kappa * np.exp(-model.mu * J)
    if n == 0:
        return base, np.zeros(len(ys))
    px = p(x)
    if np.any(px <= 0):
        i = int(np.argmax(px <= 0))
        raise ValueError(f"observation {i} at {tuple(x[i])} has zero retention probability")
    r = model.r
    interp = _exposure_interpolator(model, p, W, x, q.h)
    lo = x.min(axis=0) - r
    hi = x.max(axis=0) + r
    area = float(np.prod(hi - lo))
    tree_x = cKDTree(x)
    # e[y, i] = 1 if adding a parent at y adds intensity at x_i
    e = (((ys[:, None, :] - x[None, :, :]) ** 2).sum(axis=2) <= r * r).astype(float)
    rng = make_rng(seed)
    logden = np.empty(M)
    lognum = np.empty((M, len(ys)))
    nonzero = np.zeros(n)
    for start in range(0, M, batch):
        mb = min(batch, M - start)
        counts = rng.poisson(model.kappa * area, mb)
        owner = np.repeat(np.arange(mb), counts)
        pts = lo + (hi - lo) * rng.random((len(owner), 2))
        keep = rng.random(len(owner)) < np.exp(-model.mu * _interp_xy(interp, pts)) if len(owner) else np.zeros(0, bool)
        pts, owner = pts[keep], owner[keep]
        c = np.zeros((mb, n))
        if len(pts):
            pairs = tree_x.sparse_distance_matrix(cKDTree(pts), r, output_type="ndarray")
            np.add.at(c, (owner[pairs["j"]], pairs["i"]), 1.0)
        nonzero += (c > 0).sum(axis=0)
        with np.errstate(divide="ignore"):
            logc = np.log(c)
            logden[start : start + mb] = logc.sum(axis=1)
            for k in range(len(ys)):
                lognum[start : start + mb, k] = np.log(c + e[k]).sum(axis=1)
    if not np.isfinite(logden).any():
        i = int(np.argmin(nonzero))
        raise ValueError(f"all importance weights are zero; observation {i} at {tuple(x[i])} has no possible parent")
    L = logden.max()
    den = np.exp(logden - L)
    num = np.exp(lognum - L)
    ratio = num.sum(axis=0) / den.sum()
    resid = num - ratio[None, :] * den[:, None]
    se = np.sqrt(resid.var(axis=0, ddof=1) / M) / den.mean()
    return base * ratio, base * se
