"""Mahalanobis chi-square QQ data for checking joint Gaussianity of log-domain frames."""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma

import numpy as np
from scipy.special import gammainc, gammaincc

from .model import DomainError


@dataclass(frozen=True)
class QQData:
    ordered_d2: np.ndarray
    theoretical_q: np.ndarray


def mahalanobis_sq(z, mu_hat, sigma_hat) -> float:
    z = np.asarray(z, dtype=float)
    diff = z - np.asarray(mu_hat, dtype=float)
    try:
        c = np.linalg.cholesky(np.asarray(sigma_hat, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is singular or not positive definite") from exc
    w = np.linalg.solve(c, diff)
    return float(w @ w)


def chi2_cdf(x, df: float):
    return gammainc(0.5 * df, 0.5 * np.asarray(x, dtype=float))


def chi2_ppf(p: float, df: float, tol: float = 1e-14, max_iter: int = 200) -> float:
    """Inverse chi-square CDF: Newton steps safeguarded by a shrinking bracket.

    Above the median the complementary function is solved instead, which keeps
    full relative accuracy in the upper tail.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    k = 0.5 * df
    upper = p > 0.5
    target = 1.0 - p if upper else p

    def resid(x):
        # increasing in x in both branches
        return target - float(gammaincc(k, 0.5 * x)) if upper else float(gammainc(k, 0.5 * x)) - target

    lo, hi = 0.0, max(1.0, df)
    while resid(hi) < 0:
        lo, hi = hi, 2.0 * hi
    x = 0.5 * (lo + hi)
    logc = -k * np.log(2.0) - lgamma(k)
    for _ in range(max_iter):
        f = resid(x)
        if f < 0:
            lo = x
        else:
            hi = x
        dens = np.exp(logc + (k - 1) * np.log(x) - 0.5 * x) if x > 0 else 0.0
        step = f / dens if dens > 0 else np.inf
        nxt = x - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= tol * nxt or hi - lo <= tol * lo:
            return float(nxt)
        x = nxt
    return float(x)


def qq_chi2(samples, use_sample_moments: bool = True, mu_hat=None, sigma_hat=None) -> QQData:
    """Ordered squared distances against chi-square quantiles at (k - 0.5)/n."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 2:
        raise DomainError("need at least two samples")
    if use_sample_moments:
        if n < d + 1:
            raise DomainError(f"sample covariance is singular with n={n} <= d={d}")
        mu_hat = X.mean(axis=0)
        sigma_hat = np.atleast_2d(np.cov(X, rowvar=False))
    elif mu_hat is None or sigma_hat is None:
        raise ValueError("caller-supplied moments required when use_sample_moments is False")
    mu_hat = np.asarray(mu_hat, dtype=float)
    sigma_hat = np.atleast_2d(np.asarray(sigma_hat, dtype=float))
    try:
        c = np.linalg.cholesky(sigma_hat)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is singular or not positive definite") from exc
    W = np.linalg.solve(c, (X - mu_hat).T)
    d2 = np.sort((W * W).sum(axis=0))
    q = np.array([chi2_ppf((k - 0.5) / n, d) for k in range(1, n + 1)])
    return QQData(d2, q)
