"""Unconstrained parameterisation of the between-study covariance.

``z = (log sigma1, log sigma2, atanh rho)`` maps onto the PSD cone; the
natural parameters are ``theta = (sigma1sq, sigma2sq, sigma12)``.
"""

from __future__ import annotations

import math

import numpy as np

from .core import BetweenStudyCov

LOG_SD_BOUNDS = (-12.0, 4.0)
ATANH_RHO_BOUNDS = (-6.0, 6.0)
BOUNDS = np.array([LOG_SD_BOUNDS, LOG_SD_BOUNDS, ATANH_RHO_BOUNDS])

# Derivatives of Sigma w.r.t. (sigma1sq, sigma2sq, sigma12).
SIGMA_BASIS = np.array(
    [
        [[1.0, 0.0], [0.0, 0.0]],
        [[0.0, 0.0], [0.0, 1.0]],
        [[0.0, 1.0], [1.0, 0.0]],
    ]
)


def to_unconstrained(sigma: BetweenStudyCov, floor: float = 1e-4, rho_cap: float = 0.95) -> np.ndarray:
    """Map ``sigma`` to ``z``; variances are floored and ``rho`` clamped so ``z`` is finite."""
    s1 = math.sqrt(max(sigma.sigma1sq, floor))
    s2 = math.sqrt(max(sigma.sigma2sq, floor))
    rho = max(-rho_cap, min(rho_cap, sigma.rho))
    return np.clip(np.array([math.log(s1), math.log(s2), math.atanh(rho)]), BOUNDS[:, 0], BOUNDS[:, 1])


def from_unconstrained(z) -> BetweenStudyCov:
    s1, s2 = math.exp(z[0]), math.exp(z[1])
    return BetweenStudyCov(s1 * s1, s2 * s2, math.tanh(z[2]) * s1 * s2)


def theta_from_z(z) -> np.ndarray:
    s1, s2 = math.exp(z[0]), math.exp(z[1])
    return np.array([s1 * s1, s2 * s2, math.tanh(z[2]) * s1 * s2])


def jacobian(z) -> np.ndarray:
    """``d theta / d z`` (rows: theta components, columns: z components)."""
    s1, s2, rho = math.exp(z[0]), math.exp(z[1]), math.tanh(z[2])
    s12 = rho * s1 * s2
    return np.array(
        [
            [2 * s1 * s1, 0.0, 0.0],
            [0.0, 2 * s2 * s2, 0.0],
            [s12, s12, (1 - rho * rho) * s1 * s2],
        ]
    )


def second_derivatives(z) -> np.ndarray:
    """``d^2 theta_k / dz dz^T`` stacked with shape (3, 3, 3)."""
    s1, s2, rho = math.exp(z[0]), math.exp(z[1]), math.tanh(z[2])
    s12 = rho * s1 * s2
    c = (1 - rho * rho) * s1 * s2
    out = np.zeros((3, 3, 3))
    out[0, 0, 0] = 4 * s1 * s1
    out[1, 1, 1] = 4 * s2 * s2
    out[2] = [[s12, s12, c], [s12, s12, c], [c, c, -2 * rho * c]]
    return out


def chain_gradient(z, grad_theta) -> np.ndarray:
    return jacobian(z).T @ grad_theta


def chain_hessian(z, grad_theta, hess_theta) -> np.ndarray:
    j = jacobian(z)
    return j.T @ hess_theta @ j + np.einsum("k,kab->ab", grad_theta, second_derivatives(z))


def at_bounds(z, tol: float = 1e-6) -> tuple[bool, bool, bool]:
    """Which components of ``z`` sit on the box used by the optimisers."""
    z = np.asarray(z)
    return tuple(bool(v) for v in ((z <= BOUNDS[:, 0] + tol) | (z >= BOUNDS[:, 1] - tol)))
