"""Robust bivariate random-effects meta-analysis of diagnostic test accuracy
using the density power divergence."""

from .baseline import BaselineFit, fit_baseline, log_likelihood, restricted_log_likelihood
from .core import (
    BetweenStudyCov,
    DataError,
    DegenerateCovarianceError,
    LogitObservation,
    PooledMean,
    StudyCounts,
    StudyData,
    inverse_logit,
    logit,
    logit_transform,
    read_counts_csv,
)
from .diagnostics import contribution_matrices, contribution_rates, diagnose, dpd_weight_report
from .dpd import DpdFit, TotalDownweightingError, dpd_objective, dpd_weight, estimating_functions, fit_dpd
from .inference import ConfidenceInterval, hksj_ci, sandwich_cov, wald_ci
from .tuning import TuningResult, alpha_ges, hyvarinen_score, select_alpha

__version__ = "0.1.0"

__all__ = [
    "BaselineFit",
    "BetweenStudyCov",
    "ConfidenceInterval",
    "DataError",
    "DegenerateCovarianceError",
    "DpdFit",
    "LogitObservation",
    "PooledMean",
    "StudyCounts",
    "StudyData",
    "TotalDownweightingError",
    "TuningResult",
    "alpha_ges",
    "contribution_matrices",
    "contribution_rates",
    "diagnose",
    "dpd_objective",
    "dpd_weight",
    "dpd_weight_report",
    "estimating_functions",
    "fit_baseline",
    "fit_dpd",
    "hksj_ci",
    "hyvarinen_score",
    "inverse_logit",
    "log_likelihood",
    "logit",
    "logit_transform",
    "read_counts_csv",
    "restricted_log_likelihood",
    "sandwich_cov",
    "select_alpha",
    "wald_ci",
]
