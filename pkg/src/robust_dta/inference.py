"""Sandwich variance of the pooled mean and Wald / HKSJ-type confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import params
from .core import StudyData, as_study_data, inverse_logit
from .dpd import DpdFit, estimating_functions, estimating_jacobians

CI_KINDS = ("wald", "hksj")


class SingularSandwichError(ArithmeticError):
    pass


@dataclass(frozen=True)
class MuCovariance:
    """Covariance of ``(mu1_hat, mu2_hat)``; ``a_condition`` is the condition number of ``A``."""

    matrix: np.ndarray
    a_condition: float = float("nan")
    free_parameters: tuple = ()

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(self.variances)


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float = 0.95
    kind: str = "wald"
    scale: str = "logit"
    estimate: float | None = None

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def free_parameter_mask(fit: DpdFit) -> np.ndarray:
    """Parameters kept in the sandwich, on the ``(mu1, mu2, log sigma1, log sigma2, atanh rho)`` scale.

    Coordinates fitted on the optimisation boundary are held fixed; a
    vanishing standard deviation also fixes ``rho``, which is then unidentified.
    """
    b1, b2, brho = fit.boundary
    keep = np.ones(5, dtype=bool)
    keep[2], keep[3] = not b1, not b2
    keep[4] = not (b1 or b2 or brho)
    return keep


def sandwich_pieces(data, fit: DpdFit, scale: str = "natural") -> tuple[np.ndarray, np.ndarray]:
    """``A = sum_i d psi_i / d eta^T`` and ``B = sum_i psi_i psi_i^T`` (5x5).

    ``scale="natural"`` uses ``(mu, sigma1sq, sigma2sq, sigma12)``;
    ``scale="unconstrained"`` uses ``(mu, log sigma1, log sigma2, atanh rho)``.
    """
    data = as_study_data(data)
    psi = estimating_functions(data, fit.mu_hat, fit.sigma_hat, fit.alpha)
    a = estimating_jacobians(data, fit.mu_hat, fit.sigma_hat, fit.alpha).sum(axis=0)
    if scale == "unconstrained":
        z = params.to_unconstrained(fit.sigma_hat, floor=1e-24, rho_cap=0.999999)
        j = np.eye(5)
        j[2:, 2:] = params.jacobian(z)
        grad_theta = psi[:, 2:].sum(axis=0)
        psi = psi @ j
        a = j.T @ a @ j
        a[2:, 2:] += np.einsum("k,kab->ab", grad_theta, params.second_derivatives(z))
    elif scale != "natural":
        raise ValueError(f"unknown scale {scale!r}")
    return a, psi.T @ psi


def sandwich_cov(data, fit: DpdFit) -> MuCovariance:
    """Sandwich covariance ``A^{-1} B A^{-T}`` restricted to the ``mu`` block.

    ``A`` and ``B`` cover ``mu`` and the free between-study parameters so the
    uncertainty from estimating ``Sigma`` propagates to ``mu``. Away from the
    boundary the ``mu`` block does not depend on how ``Sigma`` is parameterised.
    """
    if not fit.converged:
        raise ValueError("sandwich covariance requires a converged fit")
    a, b = sandwich_pieces(data, fit, "unconstrained")
    keep = free_parameter_mask(fit)
    a, b = a[np.ix_(keep, keep)], b[np.ix_(keep, keep)]
    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularSandwichError(f"sensitivity matrix A is singular (condition number {cond:.3g})")
    a_inv = np.linalg.inv(a)
    v = a_inv @ b @ a_inv.T
    v = 0.5 * (v + v.T)
    labels = ("mu1", "mu2", "log_sigma1", "log_sigma2", "atanh_rho")
    return MuCovariance(v[:2, :2], cond, tuple(l for l, k in zip(labels, keep) if k))


def gls_cov(data: StudyData, sigma) -> MuCovariance:
    """Model-based covariance ``(sum_i W_i)^{-1}`` of the GLS mean."""
    from .core import marginal_precisions

    w, _ = marginal_precisions(as_study_data(data), sigma)
    return MuCovariance(np.linalg.inv(w.sum(axis=0)))


def normal_quantile(level: float) -> float:
    return float(stats.norm.ppf(0.5 + level / 2))


def t_quantile(level: float, df: float) -> float:
    return float(stats.t.ppf(0.5 + level / 2, df))


def _check_level(level):
    if not 0 < level < 1:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")


def wald_ci(mu_j: float, v_n: float, level: float = 0.95) -> ConfidenceInterval:
    """``mu_j +/- z * sqrt(v_n)`` on the logit scale."""
    _check_level(level)
    if v_n < 0:
        raise ValueError("variance must be non-negative")
    half = normal_quantile(level) * np.sqrt(v_n)
    return ConfidenceInterval(mu_j - half, mu_j + half, level, "wald", "logit", mu_j)


def hksj_ci(mu_j: float, v_n: float, n_studies: int, level: float = 0.95) -> ConfidenceInterval:
    """``mu_j +/- t_{2N-2} * sqrt(v_n)``: the Wald interval with a t quantile on 2N - 2 df.

    The variance is not rescaled.
    """
    _check_level(level)
    if n_studies < 2:
        raise ValueError("HKSJ-type interval needs at least two studies")
    if v_n < 0:
        raise ValueError("variance must be non-negative")
    half = t_quantile(level, 2 * n_studies - 2) * np.sqrt(v_n)
    return ConfidenceInterval(mu_j - half, mu_j + half, level, "hksj", "logit", mu_j)


def back_transform(ci: ConfidenceInterval) -> ConfidenceInterval:
    if ci.scale == "probability":
        return ci
    est = None if ci.estimate is None else inverse_logit(ci.estimate)
    return ConfidenceInterval(inverse_logit(ci.lower), inverse_logit(ci.upper), ci.level, ci.kind, "probability", est)


def pooled_intervals(mu, cov: MuCovariance, n_studies: int, kinds=CI_KINDS, level: float = 0.95) -> dict:
    """Probability-scale intervals ``{kind: (se_ci, sp_ci)}`` for the requested kinds."""
    mu = np.asarray(mu.array if hasattr(mu, "array") else mu, dtype=float)
    v = cov.variances
    out = {}
    for kind in kinds:
        if kind == "wald":
            cis = [wald_ci(mu[j], v[j], level) for j in range(2)]
        elif kind == "hksj":
            cis = [hksj_ci(mu[j], v[j], n_studies, level) for j in range(2)]
        else:
            raise ValueError(f"unknown interval kind {kind!r}")
        out[kind] = tuple(back_transform(c) for c in cis)
    return out
