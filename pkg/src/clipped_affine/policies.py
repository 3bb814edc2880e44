"""Closed-form power-control policies and relative-value functions.

Analytic baselines for the quasi-static channel (clipped greedy for one-point
arrivals, maximin optimal for Bernoulli arrivals) sit next to the optimistic
and robust clipped affine policies and the approximate relative-value family
``h(b) = (1/q) log(1 + gamma_hat * q * b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import DomainError, _clip

MAX_HORIZON = 10**6


@dataclass(frozen=True)
class OptimisticParams:
    e: float
    q: float
    gamma_hat: float

    def __post_init__(self):
        if self.e < 0 or not 0 <= self.q <= 1 or not self.gamma_hat > 0:
            raise DomainError(f"invalid optimistic parameters {self}")


@dataclass(frozen=True)
class RobustParams:
    p: float
    q: float
    gamma_hat: float

    def __post_init__(self):
        # p = 1 is tolerated for q > 0 (energy lookahead of a full battery)
        if not 0 <= self.p <= 1 or not 0 <= self.q <= 1 or not self.gamma_hat > 0:
            raise DomainError(f"invalid robust parameters {self}")
        if self.p == 1 and self.q == 0:
            raise DomainError("p = 1 requires q > 0")


@dataclass(frozen=True)
class RelValueParams:
    q: float
    gamma_hat: float


@dataclass(frozen=True)
class RelValueExtParams:
    q: float
    gamma0: float
    slope: float


# ---------------------------------------------------------------------------
# relative-value family, written through phi(z) = log(1+z)/z so that q -> 0
# is continuous without a branch on q


@njit(cache=True)
def _phi(z):
    if abs(z) < 1e-3:
        return 1.0 - z / 2.0 + z * z / 3.0 - z**3 / 4.0 + z**4 / 5.0
    return math.log1p(z) / z


@njit(cache=True)
def _dphi(z):
    if abs(z) < 1e-3:
        return -0.5 + 2.0 * z / 3.0 - 0.75 * z * z + 0.8 * z**3 - 5.0 * z**4 / 6.0
    return (z / (1.0 + z) - math.log1p(z)) / (z * z)


@njit(cache=True)
def _rel_value(b, q, gamma_hat):
    y = gamma_hat * b
    return y * _phi(y * q)


@njit(cache=True)
def _rel_value_grad(b, q, gamma_hat):
    """Partial derivatives of the relative value w.r.t. (q, gamma_hat)."""
    y = gamma_hat * b
    z = y * q
    return y * y * _dphi(z), b / (1.0 + z)


@njit(cache=True)
def _rel_value_and_grad(b, q, gamma_hat):
    """Relative value and its partials w.r.t. (q, gamma_hat), one log per call."""
    y = gamma_hat * b
    z = y * q
    if abs(z) < 1e-3:
        phi = 1.0 - z / 2.0 + z * z / 3.0 - z**3 / 4.0 + z**4 / 5.0
        dphi = -0.5 + 2.0 * z / 3.0 - 0.75 * z * z + 0.8 * z**3 - 5.0 * z**4 / 6.0
    else:
        lg = math.log1p(z)
        phi = lg / z
        dphi = (z / (1.0 + z) - lg) / (z * z)
    return y * phi, y * y * dphi, b / (1.0 + z)


@njit(cache=True)
def _optimistic(b, gamma, c, e, q, gamma_hat):
    b0 = max(b + e - c, 0.0)
    if gamma <= 0.0:
        return b0
    u = (q * (b + e) - 1.0 / gamma + 1.0 / gamma_hat) / (1.0 + q)
    return _clip(u, b0, b)


@njit(cache=True)
def _robust(b, gamma, p, q, gamma_hat):
    if gamma <= 0.0:
        return 0.0
    denom = 1.0 - p + q
    if denom <= 0.0:
        return b
    u = (q * b - (1.0 - p) / gamma + 1.0 / gamma_hat) / denom
    return _clip(u, 0.0, b)


# ---------------------------------------------------------------------------
# analytic baselines


def clipped_greedy(x: float, e: float) -> float:
    return min(x, e)


def h1(x, e: float):
    """Relative value for one-point arrivals at ``e``: integral of r'(min(v, e))."""
    x = np.asarray(x, dtype=float)
    out = np.where(x < e, np.log1p(x), math.log1p(e) + (x - e) / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def _check_p(p):
    if not 0.0 < p < 1.0:
        raise DomainError(f"p must lie in (0, 1), got {p}")


def maximin_horizon(x: float, p: float) -> int:
    """Smallest ``i >= 1`` with ``[1 + p (x + i)] (1 - p)**i < 1``."""
    _check_p(p)
    if x < 0:
        raise DomainError("x must be nonnegative")
    log1mp = math.log1p(-p)
    for i in range(1, MAX_HORIZON + 1):
        # compare in the log domain; the product underflows for long horizons
        if math.log1p(p * (x + i)) + i * log1mp < 0.0:
            return i
    raise DomainError(f"maximin horizon exceeds {MAX_HORIZON} for x={x}, p={p}")


def _maximin_with_horizon(x: float, p: float, m: int) -> float:
    u = p * (x + m) / -math.expm1(m * math.log1p(-p)) - 1.0
    return min(max(u, 0.0), x)


def maximin_policy(x: float, p: float) -> float:
    """Maximin optimal consumption for Bernoulli arrivals with probability ``p``."""
    return _maximin_with_horizon(x, p, maximin_horizon(x, p))


def h2(x: float, p: float) -> float:
    """Relative value for Bernoulli arrivals, by the finite maximin sum."""
    m = maximin_horizon(x, p)
    total, weight, rest = 0.0, 1.0, float(x)
    for _ in range(m):
        u = maximin_policy(rest, p)
        total += weight * math.log1p(u)
        rest -= u
        weight *= 1.0 - p
        if rest <= 0.0:
            break
    return total


# ---------------------------------------------------------------------------
# approximate relative values and clipped affine policies


def rel_value(b, params: RelValueParams):
    """``(1/q) log(1 + gamma_hat q b)``, equal to ``gamma_hat b`` at ``q = 0``."""
    out = _rv(b, params.q, params.gamma_hat)
    return float(out) if np.ndim(out) == 0 else out


def rel_value_ext(b, gamma, params: RelValueExtParams):
    gamma_hat = params.slope * gamma + params.gamma0
    if np.any(np.asarray(gamma_hat) <= 0):
        raise DomainError("effective SNR coefficient s*gamma + gamma0 must be positive")
    return rel_value(b, RelValueParams(params.q, gamma_hat))


def optimistic_policy(b: float, gamma: float, c: float, params: OptimisticParams) -> float:
    """Optimistic clipped affine action, in ``[max(b+e-c, 0), b]``."""
    return _optimistic(float(b), float(gamma), float(c), params.e, params.q,
                       params.gamma_hat)


def robust_policy(b: float, gamma: float, params: RobustParams) -> float:
    """Robust clipped affine action, in ``[0, b]``."""
    return _robust(float(b), float(gamma), params.p, params.q, params.gamma_hat)


def _check_action(u, b):
    if np.any(np.asarray(u) < 0) or np.any(np.asarray(u) > b):
        raise DomainError(f"infeasible action outside [0, {b}]")


def _phi_np(z):
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    series = 1.0 - z / 2.0 + z * z / 3.0 - z**3 / 4.0 + z**4 / 5.0
    return np.where(small, series, np.log1p(safe) / safe)


def _rv(x, q, gamma_hat):
    y = gamma_hat * np.asarray(x, dtype=float)
    return y * _phi_np(q * y)


def problem3_objective(u, b, gamma, c, params: OptimisticParams):
    """``r(gamma u) + h(b - u + min(e, c - b + u))`` (vectorized in ``u``)."""
    _check_action(u, b)
    u = np.asarray(u, dtype=float)
    nxt = b - u + np.minimum(params.e, c - b + u)
    return np.log1p(gamma * u) + _rv(nxt, params.q, params.gamma_hat)


def problem4_objective(u, b, gamma, c, params: RobustParams):
    """``r(gamma u) + (1-p) h(b - u) + p h(c)`` (vectorized in ``u``)."""
    _check_action(u, b)
    u = np.asarray(u, dtype=float)
    return (np.log1p(gamma * u)
            + (1.0 - params.p) * _rv(b - u, params.q, params.gamma_hat)
            + params.p * _rv(c, params.q, params.gamma_hat))


def linear_policy_orbit(x: float, q: float, e: float, n: int) -> float:
    """``n``-fold iterate of ``x -> (1-q) x + e``, the battery map of ``u = qx``."""
    if q <= 0:
        raise DomainError("q = 0 has no fixed point")
    fixed = e / q
    return (1.0 - q) ** n * (x - fixed) + fixed
