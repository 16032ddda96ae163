"""Density power divergence (DPD) estimation for the bivariate normal-normal model.

For a study with marginal covariance ``V_i = S_i + Sigma`` and precision
``W_i = V_i^{-1}`` the DPD objective is::

    D(mu, Sigma; alpha) = sum_i [ g_i / alpha - Q_i^alpha / (1 + alpha)^2 ]
    Q_i = (2 pi)^{-1} det(V_i)^{-1/2}
    g_i = Q_i^alpha exp(-alpha/2 (Y_i - mu)^T W_i (Y_i - mu))

``g_i`` is the DPD weight; it tends to 1 as ``alpha -> 0`` and to 0 for
studies far from the fitted model. The objective is maximised by
alternating the weighted-GLS fixed point for ``mu`` with a Newton ascent in
``Sigma`` on the ``(log sigma1, log sigma2, atanh rho)`` scale.

Parameters are ordered ``(mu1, mu2, sigma1sq, sigma2sq, sigma12)`` wherever a
five-vector of scores or a 5x5 Jacobian is returned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import params
from .core import (
    BetweenStudyCov,
    LogitObservation,
    PooledMean,
    StudyData,
    as_study_data,
    inverse_2x2,
    marginal_covariances,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
MIN_WEIGHT = 1e-12


class TotalDownweightingError(ArithmeticError):
    """All DPD weights vanished; the weighted precision cannot be inverted."""


class SigmaOptimizationError(ArithmeticError):
    """The between-study covariance step produced a non-finite objective."""


def _mu_array(mu) -> np.ndarray:
    return mu.array if isinstance(mu, PooledMean) else np.asarray(mu, dtype=float)


def _sigma_matrix(sigma) -> np.ndarray:
    return sigma.matrix if isinstance(sigma, BetweenStudyCov) else np.asarray(sigma, dtype=float)


def _expm1_ratio(x, alpha):
    """``(exp(alpha * x) - 1) / alpha`` with its ``alpha = 0`` limit ``x``."""
    if alpha == 0:
        return np.asarray(x, dtype=float)
    return np.expm1(alpha * np.asarray(x)) / alpha


@dataclass(frozen=True)
class StudyTerms:
    """Per-study building blocks evaluated at one ``(mu, Sigma, alpha)``."""

    alpha: float
    w: np.ndarray  # (N, 2, 2) marginal precisions
    r: np.ndarray  # (N, 2) residuals Y_i - mu
    u: np.ndarray  # (N, 2) W_i r_i
    d: np.ndarray  # (N,) Mahalanobis distances r_i^T W_i r_i
    log_q: np.ndarray  # (N,) log Q_i
    g: np.ndarray  # (N,) DPD weights

    @property
    def q_alpha(self) -> np.ndarray:
        return np.exp(self.alpha * self.log_q)


def study_terms(data: StudyData, mu, sigma, alpha: float) -> StudyTerms:
    w, det = inverse_2x2(marginal_covariances(data, _sigma_matrix(sigma)))
    r = data.y - _mu_array(mu)
    u = np.einsum("nij,nj->ni", w, r)
    d = np.einsum("ni,ni->n", r, u)
    log_q = -LOG_2PI - 0.5 * np.log(det)
    g = np.exp(alpha * (log_q - 0.5 * d))
    return StudyTerms(alpha, w, r, u, d, log_q, g)


def q_factor(w) -> float:
    """``Q_i = (2 pi)^{-1} det(W_i^{-1})^{-1/2}``, the peak of the marginal density."""
    w = np.asarray(w, dtype=float)
    det_w = w[0, 0] * w[1, 1] - w[0, 1] * w[1, 0]
    if not (w[0, 0] > 0 and det_w > 0):
        raise ValueError("precision matrix must be positive definite")
    return math.sqrt(det_w) / (2 * math.pi)


def dpd_weight(obs: LogitObservation, mu, sigma: BetweenStudyCov, alpha: float) -> float:
    """DPD weight ``g_i`` of a single study."""
    data = StudyData([[obs.y1, obs.y2]], [[obs.s1sq, obs.s2sq]], (obs.study_id or "1",))
    return float(study_terms(data, mu, sigma, alpha).g[0])


def dpd_weights(data, mu, sigma, alpha: float) -> np.ndarray:
    return study_terms(as_study_data(data), mu, sigma, alpha).g


def dpd_objective(data, mu, sigma, alpha: float, centered: bool = False) -> float:
    """Evaluate ``D(mu, Sigma; alpha)``.

    With ``centered=True`` the constant ``N (1/alpha - 1)`` is removed, computed
    without cancellation so that the value tends to the log-likelihood as
    ``alpha -> 0`` (and equals it at ``alpha = 0``).
    """
    data = as_study_data(data)
    t = study_terms(data, mu, sigma, alpha)
    if centered:
        gain = _expm1_ratio(t.log_q - 0.5 * t.d, alpha)
        penalty = -np.expm1(alpha * t.log_q - 2.0 * math.log1p(alpha))
        return float(np.sum(gain + penalty))
    if alpha <= 0:
        raise ValueError("the uncentered objective requires alpha > 0")
    return float(np.sum(t.g / alpha - t.q_alpha / (1.0 + alpha) ** 2))


def _sigma_scores(t: StudyTerms) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``h_k = (u^T E_k u - tr(W E_k)) / 2`` and ``tr(W E_k)`` for the three Sigma directions."""
    u, w = t.u, t.w
    quad = np.column_stack([u[:, 0] ** 2, u[:, 1] ** 2, 2 * u[:, 0] * u[:, 1]])
    tr = np.column_stack([w[:, 0, 0], w[:, 1, 1], 2 * w[:, 0, 1]])
    return 0.5 * (quad - tr), tr, quad


def estimating_functions(data, mu, sigma, alpha: float) -> np.ndarray:
    """Per-study scores ``psi_i = d D_i / d eta`` with shape (N, 5).

    The first two columns are ``g_i W_i (Y_i - mu)``; their sum is the
    estimating equation for ``mu``. At ``alpha = 0`` these are the
    log-likelihood scores.
    """
    t = study_terms(as_study_data(data), mu, sigma, alpha)
    return _psi(t)


def _psi(t: StudyTerms) -> np.ndarray:
    h, tr, _ = _sigma_scores(t)
    c = t.alpha * t.q_alpha / (2.0 * (1.0 + t.alpha) ** 2)
    out = np.empty((len(t.g), 5))
    out[:, :2] = t.g[:, None] * t.u
    out[:, 2:] = t.g[:, None] * h + c[:, None] * tr
    return out


def estimating_jacobians(data, mu, sigma, alpha: float) -> np.ndarray:
    """Analytic per-study derivatives ``d psi_i / d eta^T`` with shape (N, 5, 5)."""
    t = study_terms(as_study_data(data), mu, sigma, alpha)
    return _psi_jacobian(t)


def _psi_jacobian(t: StudyTerms) -> np.ndarray:
    a = t.alpha
    g, u, w = t.g, t.u, t.w
    h, tr, _ = _sigma_scores(t)
    c = a * t.q_alpha / (2.0 * (1.0 + a) ** 2)
    basis = params.SIGMA_BASIS
    eu = np.einsum("kij,nj->nki", basis, u)  # E_k u
    weu = np.einsum("nij,nkj->nki", w, eu)  # W E_k u
    we = np.einsum("nij,kjl->nkil", w, basis)  # W E_k
    tr_wewe = np.einsum("nlij,nkji->nlk", we, we)
    u_ewe_u = np.einsum("nli,nki->nlk", eu, weu)

    jac = np.empty((len(g), 5, 5))
    jac[:, :2, :2] = g[:, None, None] * (a * u[:, :, None] * u[:, None, :] - w)
    cross = g[:, None, None] * (a * u[:, :, None] * h[:, None, :] - np.transpose(weu, (0, 2, 1)))
    jac[:, :2, 2:] = cross
    jac[:, 2:, :2] = np.transpose(cross, (0, 2, 1))
    jac[:, 2:, 2:] = (
        g[:, None, None] * (a * h[:, :, None] * h[:, None, :] - u_ewe_u + 0.5 * tr_wewe)
        - (0.5 * a) * c[:, None, None] * tr[:, :, None] * tr[:, None, :]
        - c[:, None, None] * tr_wewe
    )
    return jac


def dpd_gradient(data, mu, sigma, alpha: float) -> np.ndarray:
    """Gradient of ``D`` w.r.t. ``(mu1, mu2, sigma1sq, sigma2sq, sigma12)``."""
    return estimating_functions(data, mu, sigma, alpha).sum(axis=0)


def dpd_hessian(data, mu, sigma, alpha: float) -> np.ndarray:
    return estimating_jacobians(data, mu, sigma, alpha).sum(axis=0)


def weighted_gls(data: StudyData, w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``(sum g_i W_i)^{-1} sum g_i W_i Y_i``."""
    if g.max() < MIN_WEIGHT:
        raise TotalDownweightingError(f"total downweighting: max DPD weight {g.max():.3g} < {MIN_WEIGHT}")
    gw = g[:, None, None] * w
    total = gw.sum(axis=0)
    rhs = np.einsum("nij,nj->i", gw, data.y)
    det = total[0, 0] * total[1, 1] - total[0, 1] * total[1, 0]
    if not det > 0:
        raise TotalDownweightingError("weighted total precision is singular")
    return np.linalg.solve(total, rhs)


def mu_fixed_point_step(data, mu, sigma, alpha: float) -> PooledMean:
    """One weighted-GLS update of ``mu`` with the DPD weights evaluated at ``(mu, sigma)``."""
    data = as_study_data(data)
    t = study_terms(data, mu, sigma, alpha)
    return PooledMean.from_array(weighted_gls(data, t.w, t.g))


def _sigma_problem(data: StudyData, mu: np.ndarray, alpha: float):
    def evaluate(z, with_hessian=True):
        theta = params.theta_from_z(z)
        sig = np.array([[theta[0], theta[2]], [theta[2], theta[1]]])
        t = study_terms(data, mu, sig, alpha)
        gain = _expm1_ratio(t.log_q - 0.5 * t.d, alpha)
        penalty = -np.expm1(alpha * t.log_q - 2.0 * math.log1p(alpha))
        value = float(np.sum(gain + penalty))
        psi = _psi(t)
        grad_theta = psi[:, 2:].sum(axis=0)
        grad_z = params.chain_gradient(z, grad_theta)
        if not with_hessian:
            return value, grad_z, None
        hess_theta = _psi_jacobian(t)[:, 2:, 2:].sum(axis=0)
        return value, grad_z, params.chain_hessian(z, grad_theta, hess_theta)

    return evaluate


def _newton_ascent(evaluate, z0, max_iter=200, gtol=1e-9, xtol=1e-12, max_step=2.0):
    """Damped Newton ascent inside the box ``params.BOUNDS``.

    The Hessian is replaced by its absolute-eigenvalue modification when it is
    not negative definite; components pinned at a bound with the gradient
    pointing outwards are frozen.
    """
    lo, hi = params.BOUNDS[:, 0], params.BOUNDS[:, 1]
    z = np.clip(np.asarray(z0, dtype=float), lo, hi)
    f, g, h = evaluate(z)
    if not np.isfinite(f):
        raise SigmaOptimizationError(f"non-finite objective at z={z}")
    for it in range(max_iter):
        free = ~(((z <= lo) & (g < 0)) | ((z >= hi) & (g > 0)))
        gf = np.where(free, g, 0.0)
        if np.max(np.abs(gf)) <= gtol * max(1.0, abs(f)):
            break
        hf = -h[np.ix_(free, free)]
        evals, evecs = np.linalg.eigh(hf)
        scale = max(np.max(np.abs(evals)), 1e-12)
        evals = np.maximum(np.abs(evals), 1e-8 * scale)
        step = np.zeros_like(z)
        step[free] = evecs @ ((evecs.T @ g[free]) / evals)
        norm = np.max(np.abs(step))
        if norm > max_step:
            step *= max_step / norm
        slope = float(g @ step)
        t = 1.0
        accepted = False
        for _ in range(50):
            z_new = np.clip(z + t * step, lo, hi)
            f_new, g_new, h_new = evaluate(z_new)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted or f_new < f:
            break
        dz = np.max(np.abs(z_new - z))
        z, f, g, h = z_new, f_new, g_new, h_new
        if dz <= xtol:
            break
    return z, f


def maximize_sigma(data, mu, alpha: float, sigma_init: BetweenStudyCov) -> BetweenStudyCov:
    """Maximise ``D`` over ``Sigma`` at fixed ``mu``, starting from ``sigma_init``.

    The result never has a lower objective than ``sigma_init`` (after the
    starting point is moved into the optimisation box).
    """
    data = as_study_data(data)
    z, _ = _maximize_sigma_z(data, _mu_array(mu), alpha, params.to_unconstrained(sigma_init, floor=1e-24, rho_cap=0.999999))
    return params.from_unconstrained(z)


def _maximize_sigma_z(data: StudyData, mu: np.ndarray, alpha: float, z0):
    return _newton_ascent(_sigma_problem(data, mu, alpha), z0)


@dataclass(frozen=True)
class DpdFit:
    """Result of :func:`fit_dpd`.

    ``objective`` is the uncentered ``D``; ``objective_trace`` holds the
    centered objective after each outer iteration.
    """

    mu_hat: PooledMean
    sigma_hat: BetweenStudyCov
    alpha: float
    objective: float
    converged: bool
    iterations: int
    per_study_weights: tuple
    study_ids: tuple = ()
    boundary: tuple = (False, False, False)
    mu_residual: float = float("nan")
    objective_trace: tuple = field(default=(), repr=False)

    @property
    def sensitivity(self) -> float:
        return self.mu_hat.sensitivity

    @property
    def specificity(self) -> float:
        return self.mu_hat.specificity

    @property
    def at_boundary(self) -> bool:
        return any(self.boundary)


def fit_dpd(
    data,
    alpha: float,
    init: tuple[PooledMean, BetweenStudyCov] | None = None,
    tol: float = 1e-8,
    max_iter: int = 1000,
    residual_tol: float = 1e-8,
) -> DpdFit:
    """Fit the BNN model by maximising the DPD objective.

    Parameters
    ----------
    data : StudyData or sequence of LogitObservation
    alpha : float
        Tuning parameter in (0, 1).
    init : (PooledMean, BetweenStudyCov), optional
        Starting values; defaults to the maximum-likelihood fit.
    tol : float
        Convergence when every natural parameter changes by less than
        ``tol * max(1, |value|)`` in one outer iteration.
    max_iter : int
        Maximum number of outer (mu step + Sigma step) iterations.
    residual_tol : float
        The mu estimating equation must also hold to this max-norm before the
        fit is declared converged.

    Raises
    ------
    TotalDownweightingError
        If every study is downweighted to (numerically) zero.
    """
    data = as_study_data(data)
    if data.n_studies < 2:
        raise ValueError("at least two studies are required")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if init is None:
        from .baseline import fit_baseline

        base = fit_baseline(data, "ML")
        init = (base.mu_hat, base.sigma_hat)
    mu = _mu_array(init[0]).copy()
    z = params.to_unconstrained(init[1], floor=1e-24, rho_cap=0.999999)
    theta = params.theta_from_z(z)
    trace = [dpd_objective(data, mu, params.from_unconstrained(z), alpha, centered=True)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        t = study_terms(data, mu, params.from_unconstrained(z), alpha)
        mu_new = weighted_gls(data, t.w, t.g)
        z_new, f_new = _maximize_sigma_z(data, mu_new, alpha, z)
        theta_new = params.theta_from_z(z_new)
        old = np.concatenate([mu, theta])
        new = np.concatenate([mu_new, theta_new])
        mu, z, theta = mu_new, z_new, theta_new
        trace.append(f_new)
        if np.all(np.abs(new - old) <= tol * np.maximum(1.0, np.abs(new))):
            t = study_terms(data, mu, params.from_unconstrained(z), alpha)
            if np.max(np.abs((t.g[:, None] * t.u).sum(axis=0))) <= residual_tol:
                converged = True
                break
    sigma_hat = params.from_unconstrained(z)
    t = study_terms(data, mu, sigma_hat, alpha)
    residual = float(np.max(np.abs((t.g[:, None] * t.u).sum(axis=0))))
    if not converged:
        logger.warning("DPD fit (alpha=%g) did not converge in %d iterations", alpha, max_iter)
    return DpdFit(
        mu_hat=PooledMean.from_array(mu),
        sigma_hat=sigma_hat,
        alpha=alpha,
        objective=dpd_objective(data, mu, sigma_hat, alpha),
        converged=converged,
        iterations=it,
        per_study_weights=tuple(float(v) for v in t.g),
        study_ids=data.study_ids,
        boundary=params.at_bounds(z),
        mu_residual=residual,
        objective_trace=tuple(trace),
    )
