"""Choice of the DPD tuning parameter: the fixed gross-error-sensitivity value
and a grid search minimising a Hyvarinen-score criterion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline import fit_baseline
from .core import as_study_data
from .dpd import DpdFit, TotalDownweightingError, fit_dpd, study_terms

logger = logging.getLogger(__name__)

DEFAULT_GRID = "0.01:0.50:0.01"


def alpha_ges(p: int = 2) -> float:
    """Tuning parameter minimising the gross-error sensitivity of ``mu``: ``1 / (p + 1)``."""
    if int(p) != p or p < 1:
        raise ValueError("outcome dimension p must be a positive integer")
    return 1.0 / (p + 1)


def parse_grid(spec) -> np.ndarray:
    """Parse ``"lo:hi:step"`` (inclusive) or a comma list into a sorted array of alphas."""
    if isinstance(spec, str):
        if ":" in spec:
            parts = spec.split(":")
            if len(parts) != 3:
                raise ValueError(f"grid must look like lo:hi:step, got {spec!r}")
            lo, hi, step = (float(p) for p in parts)
            if step <= 0 or hi < lo:
                raise ValueError(f"invalid grid {spec!r}")
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            values = np.round(lo + step * np.arange(n), 12)
        else:
            values = np.array([float(v) for v in spec.split(",") if v.strip()])
    else:
        values = np.asarray(list(spec), dtype=float)
    values = np.unique(values)
    if values.size == 0:
        raise ValueError("empty alpha grid")
    if np.any((values <= 0) | (values >= 1)):
        raise ValueError("grid values must lie in (0, 1)")
    return values


def _h_terms(data, mu, sigma, alpha):
    t = study_terms(as_study_data(data), mu, sigma, alpha)
    q2 = np.einsum("ni,ni->n", t.u, t.u)  # r^T W^2 r
    tr = t.w[:, 0, 0] + t.w[:, 1, 1]
    return t, q2, tr


def hyvarinen_score(data, fit_or_mu, alpha: float | None = None, sigma=None) -> float:
    """Hyvarinen-score criterion ``H(alpha; mu_hat, Sigma_hat)`` averaged over studies.

    Call as ``hyvarinen_score(data, fit)`` or
    ``hyvarinen_score(data, mu, alpha, sigma)``.
    """
    if isinstance(fit_or_mu, DpdFit):
        mu, sigma = fit_or_mu.mu_hat, fit_or_mu.sigma_hat
        alpha = fit_or_mu.alpha if alpha is None else alpha
    else:
        mu = fit_or_mu
    t, q2, tr = _h_terms(data, mu, sigma, alpha)
    phi_a = t.g  # phi(Y_i)^alpha
    terms = phi_a * (alpha * q2 - tr) + 0.5 * phi_a**2 * q2
    value = float(np.mean(terms))
    if not np.isfinite(value):
        raise ArithmeticError("non-finite Hyvarinen score")
    return value


def hyvarinen_gradient(data, mu, sigma, alpha: float) -> np.ndarray:
    """Gradient of ``H`` w.r.t. ``(mu1, mu2, sigma1sq, sigma2sq, sigma12)``."""
    t, q2, tr = _h_terms(data, mu, sigma, alpha)
    a, u, w = t.g, t.u, t.w
    wu = np.einsum("nij,nj->ni", w, u)
    common = a * (alpha * q2 - tr + a * q2)
    grad_mu = (alpha * common)[:, None] * u - (2 * alpha * a + a**2)[:, None] * wu
    h = 0.5 * (np.column_stack([u[:, 0] ** 2, u[:, 1] ** 2, 2 * u[:, 0] * u[:, 1]]) - np.column_stack([w[:, 0, 0], w[:, 1, 1], 2 * w[:, 0, 1]]))
    w2 = np.einsum("nij,njk->nik", w, w)
    d_q2 = -2 * np.column_stack([wu[:, 0] * u[:, 0], wu[:, 1] * u[:, 1], wu[:, 0] * u[:, 1] + wu[:, 1] * u[:, 0]])
    d_tr = -np.column_stack([w2[:, 0, 0], w2[:, 1, 1], 2 * w2[:, 0, 1]])
    grad_sig = (alpha * common)[:, None] * h + a[:, None] * (alpha * d_q2 - d_tr) + 0.5 * (a**2)[:, None] * d_q2
    return np.concatenate([grad_mu.sum(axis=0), grad_sig.sum(axis=0)]) / len(a)


@dataclass(frozen=True)
class GridPoint:
    alpha: float
    h: float
    mu1: float
    mu2: float
    converged: bool
    fit: DpdFit | None = field(default=None, repr=False)


@dataclass(frozen=True)
class TuningResult:
    alpha_selected: float
    criterion: str
    grid: tuple
    boundary_flag: bool = False
    excluded: tuple = ()

    @property
    def selected_fit(self) -> DpdFit | None:
        for p in self.grid:
            if p.alpha == self.alpha_selected:
                return p.fit
        return None

    def converged_points(self) -> list[GridPoint]:
        return [p for p in self.grid if p.converged]


def select_alpha(data, grid=DEFAULT_GRID, warm_start: bool = True, residual_tol: float = 1e-6) -> TuningResult:
    """Fit the DPD estimator at every grid value and pick the minimiser of ``H``.

    Non-converged grid points are excluded (and listed in ``excluded``); ties
    go to the smaller alpha. With ``warm_start`` the grid is traversed in
    ascending order and each fit starts from the previous solution.
    """
    data = as_study_data(data)
    alphas = parse_grid(grid)
    base = fit_baseline(data, "ML")
    init = (base.mu_hat, base.sigma_hat)
    points = []
    for a in alphas:
        a = float(a)
        try:
            fit = fit_dpd(data, a, init=init if warm_start else None)
        except (TotalDownweightingError, ArithmeticError, ValueError) as exc:
            logger.warning("alpha=%g: fit failed (%s)", a, exc)
            points.append(GridPoint(a, float("nan"), float("nan"), float("nan"), False))
            continue
        if fit.converged and warm_start and not fit.mu_residual <= residual_tol:
            fit = fit_dpd(data, a)
        ok = fit.converged and fit.mu_residual <= residual_tol
        h = hyvarinen_score(data, fit) if ok else float("nan")
        points.append(GridPoint(a, h, fit.mu_hat.mu1, fit.mu_hat.mu2, bool(ok), fit))
        if ok and warm_start:
            init = (fit.mu_hat, fit.sigma_hat)
    good = [p for p in points if p.converged and np.isfinite(p.h)]
    if not good:
        raise ArithmeticError("no grid point converged; cannot select alpha")
    best = min(good, key=lambda p: (p.h, p.alpha))
    boundary = best.alpha == float(alphas[0]) or best.alpha == float(alphas[-1])
    return TuningResult(
        alpha_selected=best.alpha,
        criterion="Hyvarinen",
        grid=tuple(points),
        boundary_flag=bool(boundary and len(alphas) > 1),
        excluded=tuple(p.alpha for p in points if not p.converged),
    )


def ges_result(p: int = 2) -> TuningResult:
    a = alpha_ges(p)
    return TuningResult(alpha_selected=a, criterion="GES", grid=())


def write_trace_csv(path, result: TuningResult) -> None:
    """Grid trace with columns ``alpha,H,mu1,mu2,converged`` (converged points only)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["alpha", "H", "mu1", "mu2", "converged"])
        for p in result.converged_points():
            writer.writerow([repr(p.alpha), repr(p.h), repr(p.mu1), repr(p.mu2), "true"])
