"""Quantized variational inference.

ELBO maximization where the expectation over the variational base
distribution is replaced by a cubature on an optimal quantizer of the
standard normal, shifted and scaled to the current variational Gaussian.
"""

from .estimators import EstimateReport, EstimatorSpec, Scheme, estimate
from .grid import QuantizerGrid, build_1d_gaussian, build_clvq, build_grid, cached_grid, load_grid, save_grid
from .models import BlrModel, BnnModel, FriskModel, conjugate_toy, load_csv, make_synthetic
from .optimize import OptimizerConfig, RunTrace, StopRule, benchmark, fit
from .varfamily import VariationalParams

__version__ = "0.1.0"

__all__ = [
    "BlrModel",
    "BnnModel",
    "EstimateReport",
    "EstimatorSpec",
    "FriskModel",
    "OptimizerConfig",
    "QuantizerGrid",
    "RunTrace",
    "Scheme",
    "StopRule",
    "VariationalParams",
    "benchmark",
    "build_1d_gaussian",
    "build_clvq",
    "build_grid",
    "cached_grid",
    "conjugate_toy",
    "estimate",
    "fit",
    "load_csv",
    "load_grid",
    "make_synthetic",
    "save_grid",
]
