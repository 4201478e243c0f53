"""Closed-form reference values used to cross-check estimators and solvers.

These are independent of the Monte Carlo and PDE code paths: reflection
principle for drift-free Brownian first passage, normal quantiles, and the
Gaussian lower-tail conditional expectation (with a quadrature route for a
second opinion).
"""

from __future__ import annotations

import math

from scipy.integrate import quad
from scipy.special import ndtr, ndtri

__all__ = [
    "brownian_hit_prob",
    "brownian_stay_above",
    "gaussian_lower_cvar",
    "gaussian_lower_cvar_quadrature",
    "normal_pdf",
    "normal_quantile",
]


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    return float(ndtri(p))


def normal_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def brownian_stay_above(x0: float, level: float, sigma: float, T: float) -> float:
    """P(min over [0,T] of x0 + sigma W_t >= level), by the reflection principle.

    Equals 2 Phi((x0 - level) / (sigma sqrt(T))) - 1 for x0 >= level, else 0.
    """
    if x0 < level:
        return 0.0
    if T <= 0:
        return 1.0
    z = (x0 - level) / (sigma * math.sqrt(T))
    return float(2.0 * ndtr(z) - 1.0)


def brownian_hit_prob(x0: float, level: float, sigma: float, T: float) -> float:
    """P(x0 + sigma W_t reaches `level` within [0,T]); 1 when already there."""
    d = abs(x0 - level)
    if d == 0.0:
        return 1.0
    if T <= 0:
        return 0.0
    return float(2.0 * (1.0 - ndtr(d / (sigma * math.sqrt(T)))))


def gaussian_lower_cvar(mu: float, sd: float, beta: float) -> float:
    """E[X | X <= beta-quantile] for X ~ N(mu, sd^2).

    Closed form mu - sd * pdf(q_beta) / beta; beta >= 1 degenerates to the mean.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    if sd < 0:
        raise ValueError("sd must be nonnegative")
    if beta >= 1.0 or sd == 0.0:
        return float(mu)
    q = normal_quantile(beta)
    return float(mu - sd * normal_pdf(q) / beta)


def gaussian_lower_cvar_quadrature(mu: float, sd: float, beta: float) -> float:
    """Same tail expectation via direct quadrature, as an independent route."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    if beta >= 1.0 or sd == 0.0:
        return float(mu)
    q = mu + sd * normal_quantile(beta)

    def integrand(x):
        z = (x - mu) / sd
        return x * math.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi))

    lo = mu - 40.0 * sd
    val, _ = quad(integrand, lo, q, limit=200)
    return float(val / beta)
