"""YAML run configuration: parsing, validation and canonical serialisation."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .geom2d import Rect
from .model import ConstantThinning, LinearThinning, StepThinning, ThinningField
from .validate import ExperimentConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


THINNING_ALIASES = {"p1": "step", "p2": "linear"}
THINNING_PARAMS = {
    "constant": {"alpha": 1.0},
    "step": {"alpha1": 0.8, "alpha2": 0.2, "v": 0.5},
    "linear": {},
}
REFERENCE_CELLS = (
    {"thinning": {"variant": "step"}, "hole": [0.35, 0.35, 0.65, 0.65], "r": [0.05, 0.09, 0.13]},
    {"thinning": {"variant": "linear"}, "hole": [0.05, 0.36, 0.95, 0.64], "r": [0.05, 0.09, 0.13]},
)


@dataclass
class ModelSection:
    kappa: float = 50.0
    mu: float = 40.0
    r: float = 0.09


@dataclass
class ThinningSection:
    variant: str = "step"
    params: Dict[str, float] = field(default_factory=dict)

    def build(self) -> ThinningField:
        kw = {**THINNING_PARAMS[self.variant], **self.params}
        return {"constant": ConstantThinning, "step": StepThinning, "linear": LinearThinning}[self.variant](**kw)

    def to_dict(self) -> dict:
        return {"variant": self.variant, **{**THINNING_PARAMS[self.variant], **self.params}}


@dataclass
class GeometrySection:
    S: Tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    hole: Tuple[float, float, float, float] = (0.35, 0.35, 0.65, 0.65)


@dataclass
class ExperimentSection:
    N: int = 250
    n_sim: int = 100
    dmax: float = 0.25
    n_distances: int = 64
    quad_h: Optional[float] = None
    level: float = 0.95
    field_h: float = 0.004
    supersample: int = 4
    truth: str = "parents"


@dataclass
class OracleSection:
    enabled: bool = False
    M: int = 50_000
    grid_h: float = 0.05


@dataclass
class CondintSection:
    observed: Optional[str] = None
    grid_h: float = 0.01


@dataclass
class Cell:
    thinning: ThinningSection
    hole: Tuple[float, float, float, float]
    r: float


@dataclass
class RunConfig:
    seed: int = 1
    out: str = "out"
    model: ModelSection = field(default_factory=ModelSection)
    thinning: ThinningSection = field(default_factory=ThinningSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    condint: CondintSection = field(default_factory=CondintSection)
    cells: Optional[List[dict]] = None

    # ---------------------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "out": self.out,
            "model": asdict(self.model),
            "thinning": self.thinning.to_dict(),
            "geometry": {"S": list(self.geometry.S), "hole": list(self.geometry.hole)},
            "experiment": asdict(self.experiment),
            "oracle": asdict(self.oracle),
            "condint": asdict(self.condint),
        }
        if self.cells is not None:
            d["cells"] = [_cell_dict(c) for c in self.cells]
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()

    def scheme_rects(self) -> Tuple[Rect, Rect]:
        return Rect(*self.geometry.S), Rect(*self.geometry.hole)

    def expand_cells(self) -> List[Cell]:
        """Experiment cells: the ``cells`` list, or the single top-level setting."""
        raw = self.cells if self.cells is not None else [
            {"thinning": self.thinning.to_dict(), "hole": list(self.geometry.hole), "r": self.model.r}
        ]
        out = []
        for i, c in enumerate(raw):
            th = _thinning(c.get("thinning", self.thinning.to_dict()), f"cells[{i}].thinning")
            hole = _rect(c.get("hole", self.geometry.hole), f"cells[{i}].hole")
            radii = c.get("r", self.model.r)
            for r in radii if isinstance(radii, (list, tuple)) else [radii]:
                out.append(Cell(th, hole, _pos(r, f"cells[{i}].r")))
        return out

    def experiment_config(self, cell: Cell, index: int) -> ExperimentConfig:
        e = self.experiment
        supersample = e.supersample
        if e.quad_h is not None:
            supersample = max(1, round(e.field_h / e.quad_h))
        try:
            return ExperimentConfig(
                kappa=self.model.kappa,
                mu=self.model.mu,
                r=cell.r,
                thinning=cell.thinning.build(),
                S=Rect(*self.geometry.S),
                hole=Rect(*cell.hole),
                N=e.N,
                n_sim=e.n_sim,
                M=self.oracle.M if self.oracle.enabled else None,
                quad_h=e.quad_h,
                seed=self.seed,
                distances=tuple(np.linspace(0.0, e.dmax, e.n_distances)),
                level=e.level,
                field_h=e.field_h,
                supersample=supersample,
                truth=e.truth,
                cell=index,
            )
        except ValueError as exc:
            raise ConfigError(f"experiment: {exc}") from exc


def _cell_dict(c: dict) -> dict:
    out = {}
    if "thinning" in c:
        out["thinning"] = _thinning(c["thinning"], "cells.thinning").to_dict()
    if "hole" in c:
        out["hole"] = list(_rect(c["hole"], "cells.hole"))
    if "r" in c:
        out["r"] = list(c["r"]) if isinstance(c["r"], (list, tuple)) else c["r"]
    return out


# --------------------------------------------------------------------------
# parsing helpers


def _pos(v, key: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"{key}: expected a positive number, got {v!r}")
    return float(v)


def _int(v, key: str, lo: int) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{key}: expected an integer >= {lo}, got {v!r}")
    return v


def _rect(v, key: str) -> Tuple[float, float, float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 4 or not all(isinstance(t, (int, float)) for t in v):
        raise ConfigError(f"{key}: expected four numbers xmin, ymin, xmax, ymax")
    if not (v[0] < v[2] and v[1] < v[3]):
        raise ConfigError(f"{key}: rectangle must have xmin < xmax and ymin < ymax")
    return tuple(float(t) for t in v)


def _check_keys(d: Any, allowed, key: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{key}: expected a mapping")
    for k in d:
        if k not in allowed:
            prefix = f"{key}." if key else ""
            raise ConfigError(f"{prefix}{k}: unknown key")
    return d


def _thinning(d, key: str) -> ThinningSection:
    if isinstance(d, str):
        d = {"variant": d}
    d = _check_keys(d, {"variant", "alpha", "alpha1", "alpha2", "v"}, key)
    variant = THINNING_ALIASES.get(d.get("variant", "step"), d.get("variant", "step"))
    if variant not in THINNING_PARAMS:
        raise ConfigError(f"{key}.variant: unknown thinning {variant!r}")
    params = {}
    for k, v in d.items():
        if k == "variant":
            continue
        if k not in THINNING_PARAMS[variant]:
            raise ConfigError(f"{key}.{k}: not a parameter of the {variant} thinning")
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key}.{k}: expected a number")
        params[k] = float(v)
    sec = ThinningSection(variant, params)
    try:
        sec.build()
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return sec


def _geometry(d) -> GeometrySection:
    d = _check_keys(d, {"S", "hole", "W"}, "geometry")
    if "W" in d:
        # nested-difference form: W: {difference: [S, hole]}
        w = _check_keys(d["W"], {"difference"}, "geometry.W")
        parts = w.get("difference")
        if not isinstance(parts, list) or len(parts) != 2 or "S" in d or "hole" in d:
            raise ConfigError("geometry.W: expected {difference: [S, hole]} and no separate S/hole")
        S, hole = _rect(parts[0], "geometry.W.difference[0]"), _rect(parts[1], "geometry.W.difference[1]")
    else:
        g = GeometrySection()
        S = _rect(d.get("S", g.S), "geometry.S")
        hole = _rect(d.get("hole", g.hole), "geometry.hole")
    if not (S[0] < hole[0] and hole[2] < S[2] and S[1] < hole[1] and hole[3] < S[3]):
        raise ConfigError("geometry.hole: hole must lie strictly inside S")
    return GeometrySection(S, hole)


def _section(cls, d, key: str, checks: Dict[str, Any]):
    d = _check_keys(d, {f.name for f in fields(cls)}, key)
    kw = {}
    for name, check in checks.items():
        if name in d:
            kw[name] = check(d[name], f"{key}.{name}")
    return cls(**kw)


def _opt(check):
    return lambda v, key: None if v is None else check(v, key)


def _num(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key}: expected a number")
    return float(v)


def _level(v, key):
    v = _num(v, key)
    if not 0 < v <= 1:
        raise ConfigError(f"{key}: must lie in (0, 1]")
    return v


def _choice(*options):
    def check(v, key):
        if v not in options:
            raise ConfigError(f"{key}: expected one of {', '.join(options)}")
        return v

    return check


def _bool(v, key):
    if not isinstance(v, bool):
        raise ConfigError(f"{key}: expected true or false")
    return v


def _str(v, key):
    if not isinstance(v, str):
        raise ConfigError(f"{key}: expected a string")
    return v


def from_dict(d: dict) -> RunConfig:
    d = _check_keys(d, {f.name for f in fields(RunConfig)}, "")
    cfg = RunConfig(
        seed=_int(d.get("seed", 1), "seed", 0),
        out=_str(d.get("out", "out"), "out"),
        model=_section(ModelSection, d.get("model"), "model", {"kappa": _pos, "mu": _pos, "r": _pos}),
        thinning=_thinning(d.get("thinning", {}), "thinning"),
        geometry=_geometry(d.get("geometry")),
        experiment=_section(
            ExperimentSection,
            d.get("experiment"),
            "experiment",
            {
                "N": lambda v, k: _int(v, k, 2),
                "n_sim": lambda v, k: _int(v, k, 1),
                "dmax": _pos,
                "n_distances": lambda v, k: _int(v, k, 11),
                "quad_h": _opt(_pos),
                "level": _level,
                "field_h": _pos,
                "supersample": lambda v, k: _int(v, k, 1),
                "truth": _choice("parents", "approx"),
            },
        ),
        oracle=_section(
            OracleSection,
            d.get("oracle"),
            "oracle",
            {"enabled": _bool, "M": lambda v, k: _int(v, k, 1000), "grid_h": _pos},
        ),
        condint=_section(CondintSection, d.get("condint"), "condint", {"observed": _opt(_str), "grid_h": _pos}),
    )
    if "cells" in d:
        cells = d["cells"]
        if not isinstance(cells, list) or not cells:
            raise ConfigError("cells: expected a non-empty list")
        for i, c in enumerate(cells):
            _check_keys(c, {"thinning", "hole", "r"}, f"cells[{i}]")
        cfg.cells = [dict(c) for c in cells]
        cfg.expand_cells()  # validates every entry
    return cfg


def parse(text: str) -> RunConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    return from_dict(d or {})


def load(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def reference_grid(cfg: RunConfig) -> RunConfig:
    """``cfg`` with the two thinnings times three radii of the reference study."""
    return replace(cfg, cells=[dict(c) for c in REFERENCE_CELLS])
