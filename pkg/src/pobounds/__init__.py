"""Learning high-probability bounds on potential outcomes from observational data."""

from pobounds.kernels import KernelSpec, gram, symmetric_psd_check
from pobounds.qp import QpProblem, QpSolution, SolverSettings, kkt_residuals, solve
from pobounds.datagen import Dataset
from pobounds.bounds import BoundModel, FitConfig, fit, predict_bounds

__all__ = [
    "BoundModel",
    "Dataset",
    "FitConfig",
    "KernelSpec",
    "QpProblem",
    "QpSolution",
    "SolverSettings",
    "fit",
    "gram",
    "kkt_residuals",
    "predict_bounds",
    "solve",
    "symmetric_psd_check",
]

__version__ = "0.1.0"
