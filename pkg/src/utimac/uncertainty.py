"""Posterior inference for missing entries.

A missing log-domain entry is the sum of a conditional Gaussian (given the
frame's observed principal component) and an independent Laplace(0, b)
deviation with ``b = 1 / lam``. Its marginal is Normal-Laplace; the CDF has a
three-term closed form that is evaluated here in log space because the
individual exponential factors overflow long before their products do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import log_ndtr, ndtr

from .bcd import FitState
from .model import EXP_CAP, DomainError, TrafficWindow, WindowParams, from_log_domain

DEFAULT_LEVEL = 0.975


@dataclass(frozen=True)
class ConditionalGaussian:
    m: np.ndarray
    V: np.ndarray
    missing: np.ndarray


@dataclass(frozen=True)
class NormalLaplaceMarginal:
    m: float
    s: float
    b: float

    def __post_init__(self):
        if not self.s >= 0:
            raise DomainError("s must be non-negative")
        if not self.b > 0:
            raise DomainError("b must be positive")

    @property
    def variance(self) -> float:
        return self.s ** 2 + 2.0 * self.b ** 2


@dataclass(frozen=True)
class CredibleInterval:
    lower: float
    upper: float
    point: float
    level: float
    saturated: bool = False


def conditional_gaussian(params: WindowParams, mask, u_obs) -> ConditionalGaussian:
    """Gaussian of the missing principal component given its observed part."""
    b = np.asarray(getattr(mask, "b", mask), dtype=bool)
    obs = np.flatnonzero(b)
    mis = np.flatnonzero(~b)
    mu, sigma = params.mu, params.sigma
    if obs.size == 0:
        return ConditionalGaussian(mu[mis].copy(), sigma[np.ix_(mis, mis)].copy(), mis)
    u_obs = np.asarray(u_obs, dtype=float)
    S_oo = sigma[np.ix_(obs, obs)]
    S_mo = sigma[np.ix_(mis, obs)]
    try:
        c = np.linalg.cholesky(S_oo)
    except np.linalg.LinAlgError as exc:
        raise DomainError("observed covariance block is singular") from exc
    gain = cho_solve((c, True), S_mo.T).T
    m = mu[mis] + gain @ (u_obs - mu[obs])
    V = sigma[np.ix_(mis, mis)] - gain @ S_mo.T
    return ConditionalGaussian(m, 0.5 * (V + V.T), mis)


def _laplace_cdf(x, b):
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / b), 1.0 - 0.5 * np.exp(-np.maximum(x, 0) / b))


def nl_cdf(marg: NormalLaplaceMarginal, z):
    """CDF of N(m, s^2) + Laplace(0, b) at ``z`` (scalar or array)."""
    z = np.asarray(z, dtype=float)
    x = z - marg.m
    if marg.s == 0:
        out = _laplace_cdf(x, marg.b)
        return float(out) if out.ndim == 0 else out
    a = x / marg.s
    k = marg.s / marg.b
    half_k2 = 0.5 * k * k
    # each exponential factor times its normal CDF, combined in log space
    lo = np.minimum(half_k2 - a * k + log_ndtr(a - k), EXP_CAP)
    hi = np.minimum(half_k2 + a * k + log_ndtr(-a - k), EXP_CAP)
    out = ndtr(a) - 0.5 * np.exp(lo) + 0.5 * np.exp(hi)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def nl_pdf(marg: NormalLaplaceMarginal, z):
    z = np.asarray(z, dtype=float)
    x = z - marg.m
    b = marg.b
    if marg.s == 0:
        out = np.exp(-np.abs(x) / b) / (2 * b)
    else:
        a = x / marg.s
        k = marg.s / b
        half_k2 = 0.5 * k * k
        lo = np.minimum(half_k2 - a * k + log_ndtr(a - k), EXP_CAP)
        hi = np.minimum(half_k2 + a * k + log_ndtr(-a - k), EXP_CAP)
        out = (np.exp(lo) + np.exp(hi)) / (2 * b)
    return float(out) if out.ndim == 0 else out


def _centered_cdf(x, s, b):
    """Vectorized CDF at offset ``x`` from the centre; ``s`` may contain zeros."""
    x, s, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, s, b)))
    out = np.asarray(_laplace_cdf(x, b), dtype=float).copy()
    pos = s > 0
    if pos.any():
        a = x[pos] / s[pos]
        k = s[pos] / b[pos]
        half_k2 = 0.5 * k * k
        lo = np.minimum(half_k2 - a * k + log_ndtr(a - k), EXP_CAP)
        hi = np.minimum(half_k2 + a * k + log_ndtr(-a - k), EXP_CAP)
        out[pos] = np.clip(ndtr(a) - 0.5 * np.exp(lo) + 0.5 * np.exp(hi), 0.0, 1.0)
    return out


def quantile_halfwidths(s, b, level: float = DEFAULT_LEVEL, max_iter: int = 200) -> np.ndarray:
    """Bisection for many (s, b) pairs at once; the bracket always contains the root."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    s, b = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(b, dtype=float))
    target = 0.5 * (1.0 + level)
    lo = np.zeros(s.shape)
    hi = 10.0 * np.sqrt(s * s + 2.0 * b * b) + 50.0 * b
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = _centered_cdf(mid, s, b) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(1.0, hi)):
            break
    return 0.5 * (lo + hi)


def nl_quantile_halfwidth(marg: NormalLaplaceMarginal, level: float = DEFAULT_LEVEL,
                          max_iter: int = 200) -> float:
    """Half-width of the central ``level`` interval around the centre ``m``."""
    return float(quantile_halfwidths(marg.s, marg.b, level, max_iter))


def impute_entry(marg: NormalLaplaceMarginal, eps_j: float, level: float = DEFAULT_LEVEL,
                 delta: float | None = None) -> CredibleInterval:
    """Median point estimate and symmetric log-domain interval mapped back to traffic."""
    if delta is None:
        delta = nl_quantile_halfwidth(marg, level)
    res = from_log_domain(np.array([marg.m - delta, marg.m, marg.m + delta]), eps_j)
    lower, point, upper = res.x
    return CredibleInterval(float(lower), float(upper), float(point), level, res.saturated)


@dataclass
class WindowCompletion:
    times: np.ndarray
    completed: np.ndarray
    # rows of (t, flow, point, lower, upper, level)
    intervals: list


def complete_window(window: TrafficWindow, fit: FitState, level: float = DEFAULT_LEVEL) -> WindowCompletion:
    params = fit.params
    b = 1.0 / params.lam
    z = window.log_values()
    completed = window.traffic.copy()
    rows = []
    for i, (frame, mask) in enumerate(window.frames):
        mis = mask.missing
        if mis.size == 0:
            continue
        obs = mask.observed
        u_obs = z[i, obs] - fit.deviations.values[i]
        cg = conditional_gaussian(params, mask, u_obs)
        sd = np.sqrt(np.maximum(np.diag(cg.V), 0.0))
        delta = quantile_halfwidths(sd, b, level)
        for k, j in enumerate(mis):
            marg = NormalLaplaceMarginal(float(cg.m[k]), float(sd[k]), b)
            ci = impute_entry(marg, float(window.eps[j]), level, delta=float(delta[k]))
            completed[i, j] = ci.point
            rows.append((int(frame.t), int(j), ci.point, ci.lower, ci.upper, level))
    return WindowCompletion(window.times, completed, rows)
