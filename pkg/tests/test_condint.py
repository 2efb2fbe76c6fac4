import functools
import math
import operator

import numpy as np
import pytest

from clustercond.condint import (
    exact_rho,
    build_rho_field,
    constant_field,
    count_field,
    exposure,
    importance_oracle,
    lambda_cond,
    lambda_cond_matern,
    lambda_field,
    normalizer_c,
    partition_vector,
    rho_approx,
    set_partitions,
)
from clustercond.geom2d import Disc, Grid, QuadratureSpec, Rect, integrate
from clustercond.model import (
    ClusterModel,
    ConstantThinning,
    LinearThinning,
    ObservationScheme,
    StepThinning,
    sample_thinned_cluster,
)

UNIT = Rect(0, 0, 1, 1)
SCHEME = ObservationScheme(UNIT, Rect(0.35, 0.35, 0.65, 0.65), 0.09)
BASE = ClusterModel.matern(50, 40, 0.09)
P1 = StepThinning()
ONE = ConstantThinning(1.0)
# small offspring counts keep the importance weights well spread
SPARSE = ClusterModel.matern(200, 0.5, 0.09)
OBS3 = np.array([[0.30, 0.50], [0.33, 0.45], [0.28, 0.56]])
YGRID = np.array([[x, y] for x in np.linspace(0.22, 0.42, 5) for y in np.linspace(0.40, 0.62, 5)])


def segment_area(R, t):
    t = min(max(t, -R), R)
    return R * R * math.acos(t / R) - t * math.sqrt(R * R - t * t)


# ---------------------------------------------------------------- exposure


def test_exposure_interior_and_edges():
    r = 0.09
    assert exposure((0.2, 0.2), BASE, ONE, SCHEME.W) == pytest.approx(1.0, abs=1e-12)
    # step thinning: a disc split evenly by the jump
    assert exposure((0.5, 0.2), BASE, P1, SCHEME.W) == pytest.approx(0.5, abs=1e-6)
    # near the outer edge of S: one circular segment is lost
    want = 1 - segment_area(r, 0.03) / (math.pi * r * r)
    assert exposure((0.03, 0.2), BASE, ONE, SCHEME.W) == pytest.approx(want, abs=1e-4)
    assert exposure((0.5, 0.5), BASE, ONE, SCHEME.W) == 0.0
    assert exposure((2.0, 2.0), BASE, ONE, SCHEME.W) == 0.0


def test_normalizer_limit_and_value():
    # outside the reach of W the normaliser tends to mu p(y)
    assert normalizer_c((0.5, 0.5), BASE, P1, SCHEME.W) == pytest.approx(40 * 0.8)
    J = exposure((0.2, 0.2), BASE, P1, SCHEME.W)
    assert normalizer_c((0.2, 0.2), BASE, P1, SCHEME.W) == pytest.approx(0.8 * (1 - math.exp(-40 * J)) / J)


def test_rho_without_observations_is_prior_survival():
    for y in [(0.2, 0.2), (0.5, 0.5), (0.36, 0.5), (-0.05, 0.5)]:
        J = exposure(y, BASE, P1, SCHEME.W)
        assert rho_approx(y, np.zeros((0, 2)), BASE, P1, SCHEME) == pytest.approx(50 * math.exp(-40 * J), rel=1e-12)


def test_rho_approx_unbiased_small_mc():
    ys = np.array([[0.2, 0.2], [0.45, 0.3], [0.5, 0.5], [0.97, 0.5]])
    vals = []
    for s in range(300):
        obs = sample_thinned_cluster(BASE, P1, SCHEME, s)[2].restrict(SCHEME.W).points
        vals.append(rho_approx(ys, obs, BASE, P1, SCHEME))
    vals = np.array(vals)
    mean, se = vals.mean(0), vals.std(0, ddof=1) / math.sqrt(len(vals))
    assert np.all(np.abs(mean - 50) <= 3 * se + 1e-9), (mean, se)


def test_rho_field_matches_pointwise():
    obs = sample_thinned_cluster(BASE, P1, SCHEME, 4)[2].restrict(SCHEME.W).points
    grid = Grid(0.1, 0.1, 0.0018, 60, 60)
    field = build_rho_field(obs, BASE, P1, SCHEME, grid)
    idx = [0, 777, 1800, 3599]
    pts = grid.points()[idx]
    np.testing.assert_allclose(field.values.ravel()[idx], rho_approx(pts, obs, BASE, P1, SCHEME), rtol=2e-3)


def test_count_field_matches_brute_force():
    rng = np.random.default_rng(1)
    g = Grid(-0.1, -0.05, 0.003, 120, 110)
    pts = rng.random((80, 2)) * 0.4
    pts[:3] = g.points()[[0, 17, 999]]
    d2 = ((g.points()[:, None, :] - pts[None]) ** 2).sum(-1)
    ref = (d2 <= 0.09**2 * (1 + 1e-12)).sum(1).reshape(g.shape)
    np.testing.assert_array_equal(count_field(pts, 0.09, g), ref)


# ---------------------------------------------------------------- partitions

BELL = [1, 1, 2, 5, 15, 52, 203, 877, 4140]


@pytest.mark.parametrize("n", range(9))
def test_set_partitions_count_bell(n):
    parts = list(set_partitions(n))
    assert len(parts) == BELL[n]
    full = (1 << n) - 1
    seen = set()
    for blocks in parts:
        # disjoint blocks covering {0..n-1}
        assert sum(blocks) == full and functools.reduce(operator.or_, blocks, 0) == full
        seen.add(tuple(sorted(blocks)))
    assert len(seen) == BELL[n]


def test_partition_vector():
    assert partition_vector(0b101, 3) == (1, 0, 1)


# ---------------------------------------------------------------- exact intensity


def test_exact_no_points_closed_form():
    got = exact_rho(YGRID, np.zeros((0, 2)), SPARSE, SCHEME.W)
    want = [200 * math.exp(-0.5 * exposure(y, SPARSE, ONE, SCHEME.W)) for y in YGRID]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_exact_single_point_closed_form():
    # one point: rho(y) = exp(-mu J(y)) [kappa + 1{|y - x| <= r} / int_b(x) exp(-mu J)]
    x = OBS3[:1]
    q = QuadratureSpec(0.009)
    I = integrate(
        lambda z: np.exp(-0.5 * np.array([exposure(p, SPARSE, ONE, SCHEME.W) for p in z])), Disc(0.30, 0.50, 0.09), q
    )
    ys = np.array([[0.30, 0.50], [0.25, 0.52], [0.20, 0.50]])
    e = np.exp(-0.5 * np.array([exposure(y, SPARSE, ONE, SCHEME.W) for y in ys]))
    want = e * (200 + (np.hypot(*(ys - x).T) <= 0.09) / I)
    np.testing.assert_allclose(exact_rho(ys, x, SPARSE, SCHEME.W), want, rtol=2e-3)


def test_exact_exceeds_prior_between_close_points():
    # two points 0.1 apart deep inside W: almost surely one shared parent,
    # uniform on the lens where both discs overlap
    x = np.array([[0.10, 0.20], [0.20, 0.20]])
    r, d = 0.09, 0.1
    lens = 2 * r * r * math.acos(d / (2 * r)) - (d / 2) * math.sqrt(4 * r * r - d * d)
    mid = exact_rho((0.15, 0.20), x, BASE, SCHEME.W)
    assert mid > BASE.kappa
    assert mid == pytest.approx(1 / lens, rel=1e-3)
    assert exact_rho((0.15, 0.35), x, BASE, SCHEME.W) < 1e-9


@pytest.mark.parametrize("n", [1, 2])
def test_exact_matches_oracle(n):
    exact = exact_rho(YGRID, OBS3[:n], SPARSE, SCHEME.W)
    est, se = importance_oracle(YGRID, OBS3[:n], SPARSE, ONE, SCHEME, M=20_000, seed=n)
    assert np.all(np.abs(exact - est) <= np.maximum(3 * se, 1e-9 * exact))


def test_oracle_deterministic_given_seed():
    a = importance_oracle(YGRID[:3], OBS3[:2], SPARSE, ONE, SCHEME, M=2000, seed=5)
    b = importance_oracle(YGRID[:3], OBS3[:2], SPARSE, ONE, SCHEME, M=2000, seed=5)
    np.testing.assert_array_equal(a[0], b[0])


def test_exact_and_oracle_errors():
    with pytest.raises(ValueError):
        exact_rho(YGRID, np.random.default_rng(0).random((9, 2)), SPARSE, SCHEME.W)
    with pytest.raises(ValueError):
        importance_oracle(YGRID, OBS3, SPARSE, ONE, SCHEME, M=999)
    with pytest.raises(ValueError):
        importance_oracle(YGRID, np.array([[1.0, 0.5]]), SPARSE, LinearThinning(), SCHEME, M=1000)


# ---------------------------------------------------------------- offspring intensity


@pytest.fixture(scope="module")
def observed_field():
    obs = sample_thinned_cluster(BASE, P1, SCHEME, 2)[2].restrict(SCHEME.W).points
    return obs, build_rho_field(obs, BASE, P1, SCHEME)


def test_lambda_routes_agree(observed_field):
    obs, rho = observed_field
    lam = lambda_field(rho, BASE, P1, SCHEME, SCHEME.hole)
    for x in [(0.4, 0.5), (0.6, 0.45), (0.5, 0.5)]:
        generic = lambda_cond(x, obs, rho, BASE, P1, SCHEME)
        matern = lambda_cond_matern(x, rho, BASE, P1, SCHEME)
        assert matern == pytest.approx(generic, rel=1e-3)
        iy, ix, _ = rho.grid.cell_index(np.array([x]))
        centre = rho.grid.points()[iy[0] * rho.grid.nx + ix[0]]
        assert lam.values[iy[0], ix[0]] == pytest.approx(lambda_cond(centre, obs, rho, BASE, P1, SCHEME), rel=2e-3)


def test_lambda_with_prior_parent_intensity_is_unconditional():
    grid = Grid.covering(SCHEME.parent_window.bbox(), 0.09 / 25, pad=2)
    rho = constant_field(grid, 50.0)
    for x in [(0.45, 0.5), (0.6, 0.4)]:
        assert lambda_cond(x, None, rho, BASE, P1, SCHEME) == pytest.approx(2000 * P1.value(x), rel=1e-3)
    lam = lambda_field(rho, BASE, ONE, SCHEME, SCHEME.hole)
    vals = lam.values[np.isfinite(lam.values)]
    np.testing.assert_allclose(vals, 2000.0, rtol=1e-9)


def test_lambda_zero_where_thinning_zero(observed_field):
    obs, rho = observed_field
    assert lambda_cond((1.0, 0.5), obs, rho, BASE, LinearThinning(), SCHEME) == 0.0
