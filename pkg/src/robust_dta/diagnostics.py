"""Study-level contribution measures for a DPD fit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baseline import BaselineFit
from .core import as_study_data, marginal_precisions
from .dpd import DpdFit, study_terms


@dataclass(frozen=True)
class StudyDiagnostics:
    study_id: str
    g_weight: float
    g_relative: float
    u_matrix: np.ndarray
    p_se: float
    p_sp: float
    std_resid: tuple[float, float]


def contribution_matrices(data, fit: DpdFit) -> np.ndarray:
    """``U_i = (sum_j g_j W_j)^{-1} g_i W_i`` stacked with shape (N, 2, 2).

    The matrices sum to the identity and ``mu_hat ~= sum_i U_i Y_i``.
    """
    data = as_study_data(data)
    t = study_terms(data, fit.mu_hat, fit.sigma_hat, fit.alpha)
    gw = t.g[:, None, None] * t.w
    total = gw.sum(axis=0)
    if not np.linalg.det(total) > 0:
        raise np.linalg.LinAlgError("weighted total precision is singular")
    return np.einsum("ij,njk->nik", np.linalg.inv(total), gw)


def contribution_rates(u_matrices) -> np.ndarray:
    """Rates ``p_i = |(U_i)_jj| / sum_k |(U_k)_jj|``; column 0 sensitivity, column 1 specificity."""
    u = np.asarray(u_matrices, dtype=float)
    diag = np.abs(np.stack([u[:, 0, 0], u[:, 1, 1]], axis=1))
    totals = diag.sum(axis=0)
    if np.any(totals <= 0):
        raise ValueError("contribution matrices have an all-zero diagonal margin")
    return diag / totals


def dpd_weight_report(data, fit: DpdFit, relative: bool = False) -> np.ndarray:
    """DPD weights ``g_i`` at the fit; ``relative=True`` divides by ``Q_i^alpha`` (1 at zero residual)."""
    t = study_terms(as_study_data(data), fit.mu_hat, fit.sigma_hat, fit.alpha)
    return t.g / t.q_alpha if relative else t.g


def standardized_residuals(data, baseline_fit: BaselineFit) -> np.ndarray:
    """``(Y_ij - mu_j) / sqrt(s_ij^2 + sigma_j^2)`` under the non-robust fit, shape (N, 2)."""
    data = as_study_data(data)
    mu = baseline_fit.mu_hat.array
    sig = np.array([baseline_fit.sigma_hat.sigma1sq, baseline_fit.sigma_hat.sigma2sq])
    return (data.y - mu) / np.sqrt(data.s2 + sig)


def diagnose(data, fit: DpdFit, baseline_fit: BaselineFit) -> list[StudyDiagnostics]:
    data = as_study_data(data)
    u = contribution_matrices(data, fit)
    rates = contribution_rates(u)
    t = study_terms(data, fit.mu_hat, fit.sigma_hat, fit.alpha)
    resid = standardized_residuals(data, baseline_fit)
    return [
        StudyDiagnostics(
            study_id=sid,
            g_weight=float(t.g[i]),
            g_relative=float(t.g[i] / t.q_alpha[i]),
            u_matrix=u[i],
            p_se=float(rates[i, 0]),
            p_sp=float(rates[i, 1]),
            std_resid=(float(resid[i, 0]), float(resid[i, 1])),
        )
        for i, sid in enumerate(data.study_ids)
    ]


def gls_contribution_matrices(data, sigma) -> np.ndarray:
    """``(sum_j W_j)^{-1} W_i``, the alpha -> 0 limit of :func:`contribution_matrices`."""
    w, _ = marginal_precisions(as_study_data(data), sigma)
    return np.einsum("ij,njk->nik", np.linalg.inv(w.sum(axis=0)), w)
