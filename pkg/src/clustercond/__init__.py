"""Conditional intensities of thinned Neyman-Scott (Matern) cluster processes."""

__version__ = "0.1.0"

from .geom2d import Disc, Grid, Polyline, QuadratureSpec, Rect, Region, boundary, integrate, measure
from .model import (
    ClusterModel,
    ConstantThinning,
    LinearThinning,
    ObservationScheme,
    PointPattern,
    StepThinning,
    sample_thinned_cluster,
)
from .condint import (
    exact_rho,
    build_rho_field,
    exposure,
    importance_oracle,
    lambda_cond,
    lambda_cond_matern,
    lambda_field,
    rho_approx,
)
from .validate import DistanceGrid, ExperimentConfig, coverage_tau, envelopes, run_experiment
