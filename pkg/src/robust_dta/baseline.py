"""Maximum-likelihood and REML fitting of the standard bivariate normal-normal model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import params
from .core import BetweenStudyCov, PooledMean, StudyData, as_study_data, marginal_precisions

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
METHODS = ("ML", "REML")


class SingularPrecisionError(ArithmeticError):
    pass


def _sigma_matrix(sigma) -> np.ndarray:
    return sigma.matrix if isinstance(sigma, BetweenStudyCov) else np.asarray(sigma, dtype=float)


def _mu_array(mu) -> np.ndarray:
    return mu.array if isinstance(mu, PooledMean) else np.asarray(mu, dtype=float)


def log_likelihood(data, mu, sigma) -> float:
    """Marginal log-likelihood ``sum_i log N_2(Y_i; mu, S_i + Sigma)``."""
    data = as_study_data(data)
    w, det = marginal_precisions(data, _sigma_matrix(sigma))
    r = data.y - _mu_array(mu)
    d = np.einsum("ni,nij,nj->n", r, w, r)
    return float(np.sum(-LOG_2PI - 0.5 * np.log(det) - 0.5 * d))


def _gls(data: StudyData, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    total = w.sum(axis=0)
    det = total[0, 0] * total[1, 1] - total[0, 1] ** 2
    if not det > 0:
        raise SingularPrecisionError("total precision sum_i W_i is singular")
    return np.linalg.solve(total, np.einsum("nij,nj->i", w, data.y)), total


def gls_mean(data, sigma) -> PooledMean:
    """Generalised least-squares mean ``(sum W_i)^{-1} sum W_i Y_i``."""
    data = as_study_data(data)
    w, _ = marginal_precisions(data, _sigma_matrix(sigma))
    mu, _ = _gls(data, w)
    return PooledMean.from_array(mu)


def restricted_log_likelihood(data, sigma) -> float:
    """REML criterion: profile log-likelihood at the GLS mean minus ``log det(sum W_i) / 2``."""
    data = as_study_data(data)
    if data.n_studies < 2:
        raise ValueError("REML needs at least two studies")
    w, _ = marginal_precisions(data, _sigma_matrix(sigma))
    mu, total = _gls(data, w)
    return log_likelihood(data, mu, sigma) - 0.5 * math.log(np.linalg.det(total))


def _profile(data: StudyData, z, reml: bool):
    """Profile objective and its gradient in ``z``."""
    theta = params.theta_from_z(z)
    sig = np.array([[theta[0], theta[2]], [theta[2], theta[1]]])
    w, det = marginal_precisions(data, sig)
    mu, total = _gls(data, w)
    r = data.y - mu
    u = np.einsum("nij,nj->ni", w, r)
    value = float(np.sum(-LOG_2PI - 0.5 * np.log(det) - 0.5 * np.einsum("ni,ni->n", r, u)))
    quad = np.array([np.sum(u[:, 0] ** 2), np.sum(u[:, 1] ** 2), 2 * np.sum(u[:, 0] * u[:, 1])])
    tr = np.array([np.sum(w[:, 0, 0]), np.sum(w[:, 1, 1]), 2 * np.sum(w[:, 0, 1])])
    grad_theta = 0.5 * (quad - tr)
    if reml:
        total_inv = np.linalg.inv(total)
        value -= 0.5 * math.log(total[0, 0] * total[1, 1] - total[0, 1] ** 2)
        # d/dtheta_k of -log det(sum W_i)/2 = tr(T^{-1} sum_i W_i E_k W_i)/2
        wew = np.einsum("nij,kjl,nlm->kim", w, params.SIGMA_BASIS, w)
        grad_theta += 0.5 * np.einsum("ij,kji->k", total_inv, wew)
    return value, params.chain_gradient(z, grad_theta), mu


@dataclass(frozen=True)
class BaselineFit:
    """Result of :func:`fit_baseline`.

    ``mu_cov`` is the model-based covariance ``(sum_i W_i)^{-1}`` of the
    pooled mean at the fitted ``Sigma``.
    """

    mu_hat: PooledMean
    sigma_hat: BetweenStudyCov
    log_lik: float
    method: str
    converged: bool
    iterations: int
    objective: float
    boundary: tuple = (False, False, False)
    mu_cov: np.ndarray | None = None

    @property
    def sensitivity(self) -> float:
        return self.mu_hat.sensitivity

    @property
    def specificity(self) -> float:
        return self.mu_hat.specificity

    @property
    def at_boundary(self) -> bool:
        return any(self.boundary)


def moment_start(data: StudyData) -> BetweenStudyCov:
    """DerSimonian-Laird variances per margin and the sample correlation of ``Y``."""
    taus = []
    for j in range(2):
        y, v = data.y[:, j], data.s2[:, j]
        wts = 1.0 / v
        ybar = np.sum(wts * y) / np.sum(wts)
        q = np.sum(wts * (y - ybar) ** 2)
        denom = np.sum(wts) - np.sum(wts**2) / np.sum(wts)
        tau2 = (q - (len(y) - 1)) / denom if denom > 0 else 0.0
        taus.append(max(tau2, 1e-3))
    if data.n_studies > 2 and np.all(np.std(data.y, axis=0) > 0):
        rho = float(np.corrcoef(data.y.T)[0, 1])
    else:
        rho = 0.0
    rho = max(-0.95, min(0.95, rho))
    return BetweenStudyCov.from_tau(taus[0], taus[1], rho)


def fit_baseline(data, method: str = "REML", max_iter: int = 1000) -> BaselineFit:
    """Fit the BNN model by ML or REML.

    ``mu`` is profiled out by GLS and the Sigma criterion is maximised with
    L-BFGS-B on the ``(log sigma1, log sigma2, atanh rho)`` scale. Two
    starting points (moment estimates with their correlation, and with zero
    correlation) are tried and the better optimum kept.
    """
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    data = as_study_data(data)
    if data.n_studies < 2:
        raise ValueError("at least two studies are required")
    reml = method == "REML"
    start = moment_start(data)
    starts = [params.to_unconstrained(start)]
    z_alt = starts[0].copy()
    z_alt[2] = 0.0
    starts.append(z_alt)

    def negative(z):
        value, grad, _ = _profile(data, z, reml)
        return -value, -grad

    best = None
    for z0 in starts:
        res = minimize(
            negative,
            z0,
            jac=True,
            method="L-BFGS-B",
            bounds=params.BOUNDS,
            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-10, "maxcor": 10},
        )
        if best is None or res.fun < best.fun:
            best = res
    z = best.x
    value, grad, mu = _profile(data, z, reml)
    sigma = params.from_unconstrained(z)
    boundary = params.at_bounds(z)
    free = np.array([not b for b in boundary])
    converged = bool(best.success) or bool(np.max(np.abs(grad[free]), initial=0.0) < 1e-6)
    if not converged:
        logger.warning("%s fit did not converge: %s", method, best.message)
    w, _ = marginal_precisions(data, sigma.matrix)
    return BaselineFit(
        mu_hat=PooledMean.from_array(mu),
        sigma_hat=sigma,
        log_lik=log_likelihood(data, mu, sigma),
        method=method,
        converged=converged,
        iterations=int(best.nit),
        objective=value,
        boundary=boundary,
        mu_cov=np.linalg.inv(w.sum(axis=0)),
    )
