"""Block coordinate descent for the regularized profiled objective.

Per window the objective is

    F = sum_t [ 0.5 e_t' S_t^{-1} e_t + 0.5 logdet S_t - |W_t| ln lam + lam ||o_t||_1 ]
        + rho tr(Sigma^{-1}) + eta lam

with S_t the observed block of Sigma, W_t the observed set of frame t and
e_t = z_t - o_t - mu restricted to W_t. Blocks are swept in the order
deviations -> mean -> sparsity rate -> covariance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .inner import L1QuadProblem, solve_deviation
from .model import (
    PD_FLOOR,
    DeviationSet,
    DomainError,
    TrafficWindow,
    WindowParams,
    floor_eigenvalues,
)

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass
class FitConfig:
    outer_max_iter: int = 50
    outer_rel_tol: float = 1e-6
    inner_tol: float = 1e-8
    inner_max_iter: int | None = None
    rho: float = 1e-2
    eta: float = 1.0
    pd_floor: float = PD_FLOOR
    damping: float = 1.0
    var_floor: float = 1e-4

    def __post_init__(self):
        for name in ("outer_rel_tol", "inner_tol", "rho", "eta", "pd_floor", "var_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.outer_max_iter < 1:
            raise ValueError("outer_max_iter must be >= 1")


@dataclass
class FitState:
    params: WindowParams
    deviations: DeviationSet
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    # one (block, objective) pair per block update, starting with ("init", F0)
    block_trace: list = field(default_factory=list)
    never_observed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    inner_nonconverged: int = 0
    sigma_rejected: int = 0


class _Factors:
    """Cholesky factors of every frame's observed covariance block."""

    def __init__(self, sigma: np.ndarray, obs_idx: list):
        self.sigma = sigma
        self.chol = []
        self.logdet = []
        self._prec = []
        # frames sharing a mask pattern share one factorization
        seen = {}
        for idx in obs_idx:
            key = idx.tobytes()
            if key not in seen:
                seen[key] = self._factor(sigma, idx)
            chol, logdet, prec = seen[key]
            self.chol.append(chol)
            self.logdet.append(logdet)
            self._prec.append(prec)

    @staticmethod
    def _factor(sigma, idx):
        if idx.size == 0:
            return None, 0.0, [None]
        try:
            c = np.linalg.cholesky(sigma[np.ix_(idx, idx)])
        except np.linalg.LinAlgError as exc:
            raise FitError("observed covariance block is not positive definite") from exc
        return c, 2.0 * float(np.log(np.diag(c)).sum()), [None]

    def quad(self, i: int, e: np.ndarray) -> float:
        w = solve_triangular(self.chol[i], e, lower=True, check_finite=False)
        return float(w @ w)

    def solve(self, i: int, b: np.ndarray) -> np.ndarray:
        return cho_solve((self.chol[i], True), b, check_finite=False)

    def precision(self, i: int) -> np.ndarray:
        slot = self._prec[i]
        if slot[0] is None:
            c = self.chol[i]
            q = cho_solve((c, True), np.eye(c.shape[0]), check_finite=False)
            slot[0] = np.ascontiguousarray(0.5 * (q + q.T))
        return slot[0]


def _obs_idx(window: TrafficWindow) -> list:
    return [m.observed for _, m in window.frames]


def _trace_inv(sigma: np.ndarray) -> float:
    c = np.linalg.cholesky(sigma)
    cinv = solve_triangular(c, np.eye(sigma.shape[0]), lower=True, check_finite=False)
    return float((cinv * cinv).sum())


def frame_neg_log_joint(window: TrafficWindow, params: WindowParams, tau: int, o) -> float:
    """Negated reduced joint log-density of one frame, constants dropped."""
    frame, mask = window.frames[tau]
    idx = mask.observed
    if idx.size == 0:
        return 0.0
    o = np.asarray(o, dtype=float)
    z = np.log(frame.x[idx] + window.eps[idx])
    e = z - o - params.mu[idx]
    try:
        c = np.linalg.cholesky(params.sigma[np.ix_(idx, idx)])
    except np.linalg.LinAlgError as exc:
        raise FitError(f"frame {tau}: singular observed covariance block") from exc
    w = solve_triangular(c, e, lower=True)
    logdet = 2.0 * np.log(np.diag(c)).sum()
    return float(0.5 * w @ w + 0.5 * logdet - idx.size * np.log(params.lam)
                 + params.lam * np.abs(o).sum())


def regularized_objective(window: TrafficWindow, params: WindowParams,
                          deviations: DeviationSet) -> float:
    total = sum(
        frame_neg_log_joint(window, params, i, deviations.values[i])
        for i in range(len(window))
    )
    return float(total + params.rho * _trace_inv(params.sigma) + params.eta * params.lam)


def _sigma_terms(factors: _Factors, resid: list) -> float:
    """Sum over frames of 0.5 e' S^{-1} e + 0.5 logdet S."""
    total = 0.0
    for i, e in enumerate(resid):
        if e.size:
            total += 0.5 * factors.quad(i, e) + 0.5 * factors.logdet[i]
    return total


def _residuals(z: np.ndarray, obs_idx: list, mu: np.ndarray, deviations: DeviationSet) -> list:
    return [z[i, idx] - deviations.values[i] - mu[idx] for i, idx in enumerate(obs_idx)]


def update_mean(window: TrafficWindow, sigma, deviations: DeviationSet, fallback: float | None = None,
                factors: _Factors | None = None) -> np.ndarray:
    """Solve the normal equations for the shared mean.

    Coordinates never observed in the window do not enter the objective; they
    are set to ``fallback`` (grand mean of observed log values by default).
    """
    sigma = np.asarray(sigma, dtype=float)
    d = window.d
    obs_idx = _obs_idx(window)
    if factors is None:
        factors = _Factors(sigma, obs_idx)
    z = window.log_values()
    A = np.zeros((d, d))
    rhs = np.zeros(d)
    for i, idx in enumerate(obs_idx):
        if idx.size == 0:
            continue
        a = z[i, idx] - deviations.values[i]
        A[np.ix_(idx, idx)] += factors.precision(i)
        rhs[idx] += factors.solve(i, a)
    seen = window.masks.any(axis=0)
    mu = np.empty(d)
    if seen.any():
        sub = np.flatnonzero(seen)
        mu[sub] = np.linalg.solve(A[np.ix_(sub, sub)], rhs[sub])
    if not seen.all():
        if fallback is None:
            fallback = _grand_mean(window)
        mu[~seen] = fallback
    return mu


def _grand_mean(window: TrafficWindow) -> float:
    masks = window.masks
    if not masks.any():
        return 0.0
    return float(window.log_values()[masks].mean())


def update_lambda(window: TrafficWindow, deviations: DeviationSet, eta: float,
                  previous: float | None = None) -> float:
    """Closed-form minimizer of the sparsity-rate block."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    n_obs = sum(m.n_observed for _, m in window.frames)
    if n_obs == 0:
        if previous is None:
            raise FitError("no observed entries; sparsity rate undefined")
        return previous
    return n_obs / (deviations.l1() + eta)


def _em_candidate(sigma: np.ndarray, obs_idx: list, resid: list, factors: _Factors,
                  rho: float) -> np.ndarray:
    """Expected complete-residual second moment under ``sigma``, then the M-step."""
    d = sigma.shape[0]
    S = np.zeros((d, d))
    n = 0
    all_idx = np.arange(d)
    for i, idx in enumerate(obs_idx):
        if idx.size == 0:
            continue
        n += 1
        e = resid[i]
        full = np.empty(d)
        full[idx] = e
        mis = np.setdiff1d(all_idx, idx, assume_unique=True)
        if mis.size:
            cross = sigma[np.ix_(mis, idx)]
            full[mis] = cross @ factors.solve(i, e)
            cond = sigma[np.ix_(mis, mis)] - cross @ factors.solve(i, cross.T)
            S[np.ix_(mis, mis)] += cond
        S += np.outer(full, full)
    S = 0.5 * (S + S.T)
    return (S + 2.0 * rho * np.eye(d)) / n


def sigma_block_objective(sigma: np.ndarray, obs_idx: list, resid: list, rho: float,
                          factors: _Factors | None = None) -> float:
    if factors is None:
        factors = _Factors(sigma, obs_idx)
    return _sigma_terms(factors, resid) + rho * _trace_inv(sigma)


def update_covariance(window: TrafficWindow, mu, deviations: DeviationSet, sigma_current,
                      rho: float, damping: float = 1.0, pd_floor: float = PD_FLOOR,
                      frozen=None, _return_info: bool = False):
    """One EM-surrogate step on the covariance block, accepted only on descent.

    ``frozen`` lists coordinates whose row and column are left untouched
    (coordinates never observed in the window).
    """
    sigma_current = np.asarray(sigma_current, dtype=float)
    mu = np.asarray(mu, dtype=float)
    d = window.d
    z = window.log_values()
    obs_idx = _obs_idx(window)
    resid = _residuals(z, obs_idx, mu, deviations)
    if sum(idx.size for idx in obs_idx) == 0:
        raise FitError("no observed entries")

    active = np.arange(d)
    if frozen is not None and len(frozen):
        active = np.setdiff1d(active, np.asarray(frozen, dtype=int))
    pos = np.full(d, -1)
    pos[active] = np.arange(active.size)
    sub_idx = [pos[idx] for idx in obs_idx]
    if np.any([np.any(s < 0) for s in sub_idx]):
        raise DomainError("a frozen coordinate is observed")

    old = sigma_current[np.ix_(active, active)]
    old_factors = _Factors(old, sub_idx)
    old_obj = sigma_block_objective(old, sub_idx, resid, rho, old_factors)
    target = _em_candidate(old, sub_idx, resid, old_factors, rho)

    gamma = damping
    accepted, new_factors, new_obj = None, old_factors, old_obj
    for _ in range(40):
        cand = floor_eigenvalues((1.0 - gamma) * old + gamma * target, pd_floor)
        try:
            cand_factors = _Factors(cand, sub_idx)
            cand_obj = sigma_block_objective(cand, sub_idx, resid, rho, cand_factors)
        except (FitError, np.linalg.LinAlgError):
            cand_obj = np.inf
        if cand_obj <= old_obj:
            accepted, new_factors, new_obj = cand, cand_factors, cand_obj
            break
        gamma *= 0.5

    out = sigma_current.copy()
    if accepted is not None:
        out[np.ix_(active, active)] = accepted
    out = 0.5 * (out + out.T)
    if _return_info:
        return out, accepted is not None, new_obj, new_factors, active
    return out


def _initial_params(window: TrafficWindow, cfg: FitConfig):
    z = window.log_values()
    masks = window.masks
    counts = masks.sum(axis=0)
    seen = counts > 0
    grand = _grand_mean(window)
    zm = np.where(masks, z, 0.0)
    mu = np.full(window.d, grand)
    mu[seen] = zm[:, seen].sum(axis=0) / counts[seen]
    dev = np.where(masks, z - mu, 0.0)
    var = np.zeros(window.d)
    var[seen] = (dev[:, seen] ** 2).sum(axis=0) / counts[seen]
    pooled = float(((z - grand) ** 2)[masks].mean())
    var[~seen] = pooled
    var = np.maximum(var, cfg.var_floor)
    return mu, np.diag(var), np.flatnonzero(~seen)


def fit_window(window: TrafficWindow, config: FitConfig | None = None) -> FitState:
    cfg = config or FitConfig()
    obs_idx = _obs_idx(window)
    n_obs_total = sum(idx.size for idx in obs_idx)
    if n_obs_total == 0:
        raise FitError("window has no observed entries")
    z = window.log_values()
    mu, sigma, never = _initial_params(window, cfg)
    grand = _grand_mean(window)
    lam = 1.0
    dev = DeviationSet.zeros(window)
    active = np.setdiff1d(np.arange(window.d), never)
    pos = np.full(window.d, -1)
    pos[active] = np.arange(active.size)
    sub_idx = [pos[idx] for idx in obs_idx]

    def sigma_part(factors):
        s = _sigma_terms(factors, _residuals(z, obs_idx, mu, dev))
        return s + cfg.rho * _trace_inv(sigma)

    def lam_part():
        return -n_obs_total * np.log(lam) + lam * dev.l1() + cfg.eta * lam

    factors = _Factors(sigma, obs_idx)
    obj = sigma_part(factors) + lam_part()
    if not np.isfinite(obj):
        raise FitError("initial objective is not finite")
    trace = [obj]
    blocks = [("init", obj)]
    inner_bad = 0
    rejected = 0
    converged = False
    it = 0
    for it in range(1, cfg.outer_max_iter + 1):
        start = obj

        # deviations
        new_vals = []
        for i, idx in enumerate(obs_idx):
            if idx.size == 0:
                new_vals.append(dev.values[i])
                continue
            prob = L1QuadProblem(z[i, idx] - mu[idx], factors.precision(i), lam)
            res = solve_deviation(prob, cfg.inner_tol, cfg.inner_max_iter, o0=dev.values[i])
            inner_bad += not res.converged
            new_vals.append(res.o)
        dev = DeviationSet(new_vals)
        obj = sigma_part(factors) + lam_part()
        trace.append(obj)
        blocks.append(("deviation", obj))

        # mean
        mu = update_mean(window, sigma, dev, fallback=grand, factors=factors)
        obj = sigma_part(factors) + lam_part()
        trace.append(obj)
        blocks.append(("mean", obj))

        # sparsity rate
        lam = update_lambda(window, dev, cfg.eta, previous=lam)
        obj = sigma_part(factors) + lam_part()
        trace.append(obj)
        blocks.append(("lambda", obj))

        # covariance
        sigma, ok, _, sub_factors, _ = update_covariance(
            window, mu, dev, sigma, cfg.rho, cfg.damping, cfg.pd_floor, frozen=never,
            _return_info=True)
        rejected += not ok
        factors = _Factors(sigma, obs_idx)
        obj = sigma_part(factors) + lam_part()
        trace.append(obj)
        blocks.append(("covariance", obj))

        if not np.isfinite(obj):
            raise FitError(f"objective became non-finite at iteration {it}")
        if abs(start - obj) / max(1.0, abs(start)) < cfg.outer_rel_tol:
            converged = True
            break

    log.debug("fit: %d iterations, objective %.6g, converged=%s", it, obj, converged)
    params = WindowParams(mu, sigma, lam, cfg.rho, cfg.eta)
    return FitState(params, dev, trace, it, converged, blocks, never, inner_bad, rejected)


def exact_marginal_loglik_mc(window: TrafficWindow, params: WindowParams, n_samples: int,
                             seed: int, chunk: int = 200_000) -> float:
    """Monte Carlo estimate of the observed-data log-likelihood (small d only).

    Each frame's density is averaged over Laplace deviation draws.
    """
    if window.d > 6:
        raise ValueError("Monte Carlo marginal likelihood is limited to d <= 6")
    rng = np.random.default_rng(seed)
    z = window.log_values()
    b = 1.0 / params.lam
    total = 0.0
    for i, (_, mask) in enumerate(window.frames):
        idx = mask.observed
        m = idx.size
        if m == 0:
            continue
        c = np.linalg.cholesky(params.sigma[np.ix_(idx, idx)])
        logdet = 2.0 * np.log(np.diag(c)).sum()
        const = -0.5 * m * np.log(2 * np.pi) - 0.5 * logdet
        base = z[i, idx] - params.mu[idx]
        parts = []
        left = n_samples
        while left > 0:
            k = min(chunk, left)
            o = rng.laplace(0.0, b, size=(k, m))
            w = solve_triangular(c, (base - o).T, lower=True)
            parts.append(logsumexp(-0.5 * (w * w).sum(axis=0)))
            left -= k
        total += const + logsumexp(parts) - np.log(n_samples)
    return float(total)
