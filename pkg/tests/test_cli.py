import csv
import json
import time

import numpy as np
import pytest

from clustercond.cli import main
from clustercond.config import ConfigError, RunConfig, reference_grid, parse


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config


def test_config_round_trip_idempotent():
    text = """
seed: 4
model: {kappa: 30, mu: 10, r: 0.05}
thinning: p2
geometry: {W: {difference: [[0, 0, 1, 1], [0.05, 0.36, 0.95, 0.64]]}}
experiment: {N: 10, n_sim: 3}
cells:
  - {thinning: {variant: constant, alpha: 0.5}, r: [0.05, 0.1]}
"""
    cfg = parse(text)
    once = cfg.dump()
    assert parse(once).dump() == once
    assert cfg.thinning.variant == "linear"
    assert cfg.geometry.hole == (0.05, 0.36, 0.95, 0.64)
    assert [c.r for c in cfg.expand_cells()] == [0.05, 0.1]


@pytest.mark.parametrize(
    "text, key",
    [
        ("model: {kapa: 3}", "model.kapa"),
        ("speed: 3", "speed"),
        ("thinning: {variant: step, beta: 1}", "thinning.beta"),
        ("experiment: {N: 1}", "experiment.N"),
        ("geometry: {S: [0, 0, 1]}", "geometry.S"),
        ("geometry: {hole: [0.5, 0.5, 1.5, 0.6]}", "geometry.hole"),
        ("cells: [{r: 0.1, p: 2}]", "cells[0].p"),
        ("model: [1, 2", "YAML"),
    ],
)
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key.replace("[", r"\[").replace("]", r"\]")):
        parse(text)


def test_reference_grid_has_six_cells():
    cells = reference_grid(RunConfig()).expand_cells()
    assert [(c.thinning.variant, c.r) for c in cells] == [
        (v, r) for v in ("step", "linear") for r in (0.05, 0.09, 0.13)
    ]
    assert cells[3].hole == (0.05, 0.36, 0.95, 0.64)


# ---------------------------------------------------------------- commands


def test_simulate_writes_patterns_and_manifest(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--seed", "1", "--out", str(out)]) == 0
    for name in ("parents", "offspring", "thinned", "observed"):
        rows = read_csv(out / f"{name}.csv")
        assert rows and set(rows[0]) == {"x", "y", "role"}
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["config_hash"]) == 64 and man["seed"] == 1
    assert {a["path"] for a in man["artifacts"]} >= {"parents.csv", "thinned.csv", "simulate.svg"}
    assert (out / "simulate.svg").read_text().startswith("<svg")


def test_simulate_tiny_mu_gives_empty_offspring(tmp_path):
    cfg = write(tmp_path, "model: {mu: 1.0e-9}\n")
    out = tmp_path / "sim"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "offspring.csv").read_text() == "x,y,role\n"


def test_exit_codes(tmp_path):
    assert main(["simulate", "--config", write(tmp_path, "model: {kapa: 1}\n"), "--out", str(tmp_path)]) == 1
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert main(["simulate", "--workers", "0", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "obs.csv"
    bad.write_text("x,y\n0.5,0.5\n")  # inside the hole
    assert main(["condint", "--observed", str(bad), "--out", str(tmp_path / "c")]) == 2


def test_condint_outside_points_listed(tmp_path, capsys):
    bad = tmp_path / "obs.csv"
    bad.write_text("x,y\n0.1,0.1\n0.5,0.5\n")
    assert main(["condint", "--observed", str(bad), "--out", str(tmp_path / "c")]) == 2
    assert "(0.5, 0.5)" in capsys.readouterr().err


def test_condint_prior_rho_gives_unconditional_lambda(tmp_path):
    obs = tmp_path / "obs.csv"
    obs.write_text("x,y\n")
    cfg = write(tmp_path, "thinning: {variant: constant, alpha: 1.0}\ncondint: {grid_h: 0.05}\n")
    out = tmp_path / "c"
    assert main(["condint", "--config", cfg, "--observed", str(obs), "--out", str(out), "--debug-rho-kappa"]) == 0
    lam = np.array([float(r["lambda"]) for r in read_csv(out / "lambda.csv")])
    assert len(lam) > 0
    np.testing.assert_allclose(lam, 50 * 40, rtol=1e-9)
    rho = np.array([float(r["rho"]) for r in read_csv(out / "rho.csv")])
    np.testing.assert_allclose(rho, 50)


def test_condint_empty_observation_matches_closed_form(tmp_path):
    from clustercond.condint import exposure
    from clustercond.model import ClusterModel, StepThinning
    from clustercond.geom2d import Rect

    obs = tmp_path / "obs.csv"
    obs.write_text("x,y\n")
    out = tmp_path / "c"
    cfg = write(tmp_path, "condint: {grid_h: 0.1}\n")
    assert main(["condint", "--config", cfg, "--observed", str(obs), "--out", str(out)]) == 0
    m = ClusterModel.matern(50, 40, 0.09)
    W = Rect(0, 0, 1, 1) - Rect(0.35, 0.35, 0.65, 0.65)
    rows = read_csv(out / "rho.csv")
    for r in rows[:: max(1, len(rows) // 15)]:
        y = (float(r["x"]), float(r["y"]))
        # rho = kappa exp(-mu J): compare the implied exposure (raster J is good to ~3e-4)
        J = -np.log(float(r["rho"]) / 50) / 40
        assert J == pytest.approx(exposure(y, m, StepThinning(), W), abs=5e-4)
    lam = np.array([float(r["lambda"]) for r in read_csv(out / "lambda.csv")])
    assert np.all(np.isfinite(lam)) and np.all(lam > 0)


def test_condint_oracle_raster(tmp_path):
    obs = tmp_path / "obs.csv"
    obs.write_text("x,y\n0.30,0.50\n0.33,0.45\n")
    cfg = write(tmp_path, "model: {kappa: 200, mu: 0.5}\nthinning: {variant: constant}\noracle: {M: 2000, grid_h: 0.25}\ncondint: {grid_h: 0.1}\n")
    out = tmp_path / "c"
    assert main(["condint", "--config", cfg, "--observed", str(obs), "--out", str(out), "--oracle"]) == 0
    rows = read_csv(out / "oracle.csv")
    assert set(rows[0]) == {"x", "y", "rho", "se", "exact"}


def test_validate_smoke_under_30s(tmp_path):
    cfg = write(tmp_path, "experiment: {N: 2, n_sim: 1}\n")
    out = tmp_path / "v"
    t = time.time()
    assert main(["validate", "--config", cfg, "--out", str(out), "--workers", "1"]) == 0
    assert time.time() - t < 30
    cell = out / "cell0_step_r0.09"
    curves = read_csv(cell / "curves.csv")
    assert list(curves[0]) == ["replicate", "kind", "source", "d", "value"]
    assert len(curves) == 2 * 4 * 3 * 64
    table = read_csv(out / "coverage.csv")
    assert len(table) == 1 and "tau1_Binner" in table[0]


def test_validate_small_byte_deterministic(tmp_path):
    cfg = write(tmp_path, "seed: 5\nexperiment: {N: 20, n_sim: 2}\n")
    outs = []
    for w in (1, 2):
        out = tmp_path / f"v{w}"
        assert main(["validate", "--config", cfg, "--out", str(out), "--workers", str(w)]) == 0
        outs.append(out)
    for f in sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv")):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
