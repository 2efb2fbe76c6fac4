"""Thinned Neyman-Scott (Matern) cluster model and its samplers."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union as TUnion

import numpy as np

from .geom2d import Dilate, Difference, Disc, Grid, Rect, Region, as_points

SeedLike = TUnion[int, np.random.Generator, np.random.SeedSequence, None]

ROLES = ("parent", "offspring", "thinned")


def make_rng(seed: SeedLike, *keys: int) -> np.random.Generator:
    """Generator for ``seed``; extra ``keys`` select an independent sub-stream.

    Sub-streams are addressed by index (``SeedSequence`` spawn keys), so the
    stream of replicate ``k`` does not depend on how many others were drawn.
    """
    if isinstance(seed, np.random.Generator):
        if keys:
            raise TypeError("sub-stream keys need an integer seed")
        return seed
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(keys))
    else:
        ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


# --------------------------------------------------------------------------
# model components


@dataclass(frozen=True)
class UniformDiscKernel:
    """Offspring displacement uniform on the closed disc of radius ``r``."""

    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("kernel range must be positive")

    @property
    def height(self) -> float:
        return 1.0 / (math.pi * self.r**2)

    def density(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        norm = np.hypot(u[..., 0], u[..., 1])
        return np.where(norm <= self.r, self.height, 0.0)

    def support(self, center) -> Disc:
        return Disc(float(center[0]), float(center[1]), self.r)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        rad = self.r * np.sqrt(rng.random(n))
        ang = 2 * math.pi * rng.random(n)
        return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


@dataclass(frozen=True)
class ClusterModel:
    kappa: float
    mu: float
    kernel: UniformDiscKernel

    def __post_init__(self):
        if not (self.kappa > 0 and self.mu > 0):
            raise ValueError("kappa and mu must be positive")

    @classmethod
    def matern(cls, kappa: float, mu: float, r: float) -> "ClusterModel":
        return cls(kappa, mu, UniformDiscKernel(r))

    @property
    def r(self) -> float:
        return self.kernel.r

    def pgf(self, s, order: int = 0):
        """``order``-th derivative of the Poisson cluster-size generating function."""
        s = np.asarray(s, dtype=float)
        return self.mu**order * np.exp(self.mu * (s - 1.0))


class ThinningField:
    """Retention probability p(x) in [0, 1].

    ``pieces()`` splits the plane into regions on which p is smooth, so
    integrals of p can treat its jumps as region boundaries.
    """

    def __call__(self, pts) -> np.ndarray:
        raise NotImplementedError

    def pieces(self) -> List[Tuple[Optional[Region], Callable[[np.ndarray], np.ndarray]]]:
        return [(None, self)]

    def value(self, x) -> float:
        return float(self(as_points(x))[0])


@dataclass(frozen=True)
class ConstantThinning(ThinningField):
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("retention probability must lie in [0, 1]")

    def __call__(self, pts):
        return np.full(len(as_points(pts)), self.alpha)


@dataclass(frozen=True)
class StepThinning(ThinningField):
    """p = alpha1 for x1 <= v, alpha2 for x1 > v."""

    alpha1: float = 0.8
    alpha2: float = 0.2
    v: float = 0.5

    def __post_init__(self):
        for a in (self.alpha1, self.alpha2):
            if not 0.0 <= a <= 1.0:
                raise ValueError("retention probability must lie in [0, 1]")

    def __call__(self, pts):
        x = as_points(pts)[:, 0]
        return np.where(x <= self.v, self.alpha1, self.alpha2)

    def pieces(self):
        inf = math.inf
        left = Rect(-inf, -inf, self.v, inf)
        right = Rect(self.v, -inf, inf, inf)
        return [
            (left, lambda p: np.full(len(p), self.alpha1)),
            (right, lambda p: np.full(len(p), self.alpha2)),
        ]


@dataclass(frozen=True)
class LinearThinning(ThinningField):
    """p = 1 - x1, clipped to [0, 1]."""

    def __call__(self, pts):
        return np.clip(1.0 - as_points(pts)[:, 0], 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class GridThinning(ThinningField):
    """Piecewise-constant raster; points outside the raster get ``outside``."""

    grid: Grid
    values: np.ndarray
    outside: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError("raster values do not match the grid shape")
        if v.min() < 0 or v.max() > 1 or not 0 <= self.outside <= 1:
            raise ValueError("retention probability must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    def __call__(self, pts):
        pts = as_points(pts)
        iy, ix, ok = self.grid.cell_index(pts)
        out = np.full(len(pts), self.outside)
        out[ok] = self.values[iy[ok], ix[ok]]
        return out


# --------------------------------------------------------------------------
# patterns and observation geometry


@dataclass(frozen=True, eq=False)
class PointPattern:
    points: np.ndarray
    carrier: Region
    role: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def restrict(self, region: Region, role: Optional[str] = None) -> "PointPattern":
        keep = region.contains(self.points) if len(self.points) else np.zeros(0, bool)
        return PointPattern(self.points[keep], region, role or self.role)

    def to_csv(self, path) -> None:
        write_patterns_csv(path, [self])


def write_patterns_csv(path, patterns: Sequence[PointPattern]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "role"])
        for pat in patterns:
            for x, y in pat.points:
                w.writerow([format(x, ".17g"), format(y, ".17g"), pat.role])


def read_pattern_csv(path, carrier: Region, role: Optional[str] = None) -> PointPattern:
    """Read an ``x,y[,role]`` CSV, keeping rows of ``role`` when given."""
    pts = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected a header with x and y columns")
        for row in reader:
            if role is not None and row.get("role", role) != role:
                continue
            pts.append((float(row["x"]), float(row["y"])))
    return PointPattern(np.array(pts).reshape(-1, 2), carrier, role or "thinned")


@dataclass(frozen=True)
class ObservationScheme:
    """Study region S, hole W_h and kernel range r; W = S minus the hole."""

    S: Rect
    hole: Rect
    r: float

    @property
    def W(self) -> Region:
        return Difference(self.S, self.hole)

    @property
    def support(self) -> Region:
        """W union its border, i.e. W dilated by r."""
        return _dilated(self.W, self.r)

    @property
    def border(self) -> Region:
        return Difference(self.support, self.W)

    @property
    def parent_window(self) -> Region:
        return Dilate(self.S, self.r)


_DILATE_CACHE: dict = {}


def _dilated(region: Region, r: float) -> Region:
    # composite dilations build a KD-tree outline; share it between calls
    key = (region, r)
    if key not in _DILATE_CACHE:
        _DILATE_CACHE[key] = Dilate(region, r)
    return _DILATE_CACHE[key]


# --------------------------------------------------------------------------
# samplers


def sample_homogeneous_poisson(rate: float, region: Region, seed: SeedLike, role: str = "parent") -> PointPattern:
    if rate < 0:
        raise ValueError("Poisson rate must be non-negative")
    rng = make_rng(seed)
    bb = region.bbox()
    if bb is None:
        return PointPattern(np.zeros((0, 2)), region, role)
    if not all(math.isfinite(v) for v in bb):
        raise ValueError("cannot sample on an unbounded region")
    area = (bb[2] - bb[0]) * (bb[3] - bb[1])
    n = rng.poisson(rate * area)
    pts = np.column_stack([rng.uniform(bb[0], bb[2], n), rng.uniform(bb[1], bb[3], n)])
    if n:
        pts = pts[region.contains(pts)]
    return PointPattern(pts, region, role)


def sample_inhomogeneous_poisson(
    intensity_fn: Callable[[np.ndarray], np.ndarray],
    bound: float,
    region: Region,
    seed: SeedLike,
    role: str = "parent",
) -> PointPattern:
    """Poisson process with intensity ``intensity_fn`` by thinning a Poisson(bound) one."""
    rng = make_rng(seed)
    cand = sample_homogeneous_poisson(bound, region, rng, role)
    if len(cand) == 0:
        return cand
    lam = np.asarray(intensity_fn(cand.points), dtype=float)
    if np.any(lam > bound * (1 + 1e-12)) or np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError(f"intensity outside [0, bound={bound}] (max {np.nanmax(lam)})")
    keep = rng.random(len(lam)) * bound < lam
    return PointPattern(cand.points[keep], region, role)


def sample_thinned_cluster(
    model: ClusterModel, p: ThinningField, scheme: ObservationScheme, seed: SeedLike
) -> Tuple[PointPattern, PointPattern, PointPattern]:
    """One realisation: parents on S dilated by r, offspring clipped to S, thinned offspring."""
    rng = make_rng(seed)
    parents = sample_homogeneous_poisson(model.kappa, scheme.parent_window, rng, "parent")
    counts = rng.poisson(model.mu, len(parents))
    origin = np.repeat(parents.points, counts, axis=0)
    kids = origin + model.kernel.sample(len(origin), rng)
    if len(kids):
        kids = kids[scheme.S.contains(kids)]
    offspring = PointPattern(kids, scheme.S, "offspring")
    keep = rng.random(len(kids)) < p(kids) if len(kids) else np.zeros(0, bool)
    thinned = PointPattern(kids[keep], scheme.S, "thinned")
    return parents, offspring, thinned


def intensity(model: ClusterModel, p: ThinningField, x) -> float | np.ndarray:
    val = model.kappa * model.mu * p(as_points(x))
    return float(val[0]) if np.ndim(x) == 1 else val
