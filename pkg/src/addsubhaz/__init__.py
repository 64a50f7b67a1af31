"""Marginal additive subdistribution hazards regression for clustered
competing-risks data: IPCW least-squares estimation, cluster-robust
sandwich variance, cumulative-incidence prediction, perturbation-based
goodness-of-fit tests, and a simulation engine."""

from .censoring import CensoringModel, WeightMatrix, cc_weight, fit_censoring_km, ipcw_weight
from .dataset import (
    CauseCode,
    ClusteredDataset,
    CovariatePath,
    SubjectRecord,
    TimeGrid,
    build_grid,
    counting_process,
    load_dataset,
    save_dataset,
)
from .fitter import FitResult, baseline_at, fit, residual_path, score

__version__ = "0.1.0"

__all__ = [
    "CauseCode",
    "CensoringModel",
    "ClusteredDataset",
    "CovariatePath",
    "FitResult",
    "SubjectRecord",
    "TimeGrid",
    "WeightMatrix",
    "baseline_at",
    "build_grid",
    "cc_weight",
    "counting_process",
    "fit",
    "fit_censoring_km",
    "ipcw_weight",
    "load_dataset",
    "residual_path",
    "save_dataset",
    "score",
    "__version__",
]
