"""Per-frame deviation subproblem.

    minimize_o  0.5 (o - r)' Q (o - r) + lam * ||o||_1

with Q symmetric positive definite. Solved by cyclic coordinate descent with
exact one-dimensional soft-threshold updates, followed by a support-restricted
linear solve that lands on the exact minimizer once the sign pattern settles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit


@dataclass(frozen=True)
class L1QuadProblem:
    r: np.ndarray
    Q: np.ndarray
    lam: float

    def __post_init__(self):
        r = np.ascontiguousarray(self.r, dtype=float).reshape(-1)
        Q = np.ascontiguousarray(self.Q, dtype=float)
        if Q.shape != (r.size, r.size):
            raise ValueError("Q must be m x m with m = len(r)")
        if not np.all(np.isfinite(r)):
            raise ValueError("residual must be finite")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "Q", Q)

    @property
    def m(self) -> int:
        return self.r.size

    def objective(self, o) -> float:
        diff = o - self.r
        return 0.5 * float(diff @ self.Q @ diff) + self.lam * float(np.abs(o).sum())


class DeviationResult(NamedTuple):
    o: np.ndarray
    objective: float
    converged: bool
    sweeps: int
    kkt: float


def kkt_residual(problem: L1QuadProblem, o) -> float:
    """Largest violation of 0 in Q(o - r) + lam * d||o||_1."""
    o = np.asarray(o, dtype=float)
    if o.size == 0:
        return 0.0
    g = problem.Q @ (o - problem.r)
    nz = o != 0
    viol = np.where(
        nz,
        np.abs(g + problem.lam * np.sign(o)),
        np.maximum(0.0, np.abs(g) - problem.lam),
    )
    return float(viol.max())


@njit(cache=True)
def _kkt(Q, r, o, lam):
    m = r.size
    worst = 0.0
    for j in range(m):
        g = 0.0
        for k in range(m):
            g += Q[j, k] * (o[k] - r[k])
        if o[j] > 0.0:
            v = abs(g + lam)
        elif o[j] < 0.0:
            v = abs(g - lam)
        else:
            v = abs(g) - lam
            if v < 0.0:
                v = 0.0
        if v > worst:
            worst = v
    return worst


@njit(cache=True)
def _objective(Q, r, o, lam):
    m = r.size
    quad = 0.0
    l1 = 0.0
    for j in range(m):
        dj = o[j] - r[j]
        s = 0.0
        for k in range(m):
            s += Q[j, k] * (o[k] - r[k])
        quad += dj * s
        l1 += abs(o[j])
    return 0.5 * quad + lam * l1


@njit(cache=True)
def _cd_sweeps(Q, r, o, lam, n_sweeps):
    """Run cyclic sweeps in place; g tracks Q(o - r)."""
    m = r.size
    g = np.zeros(m)
    for j in range(m):
        s = 0.0
        for k in range(m):
            s += Q[j, k] * (o[k] - r[k])
        g[j] = s
    for _ in range(n_sweeps):
        for j in range(m):
            a = Q[j, j]
            # unconstrained 1-D minimizer, then shrink toward zero
            c = o[j] - g[j] / a
            t = lam / a
            if c > t:
                new = c - t
            elif c < -t:
                new = c + t
            else:
                new = 0.0
            step = new - o[j]
            if step != 0.0:
                for k in range(m):
                    g[k] += Q[k, j] * step
                o[j] = new


def _polish(problem: L1QuadProblem, o: np.ndarray):
    """Solve exactly on the current support and sign pattern; None if inconsistent."""
    support = np.flatnonzero(o)
    out = np.zeros_like(o)
    if support.size:
        rest = np.flatnonzero(o == 0)
        Q, r = problem.Q, problem.r
        signs = np.sign(o[support])
        rhs = Q[np.ix_(support, rest)] @ r[rest] - problem.lam * signs
        try:
            out[support] = r[support] + np.linalg.solve(Q[np.ix_(support, support)], rhs)
        except np.linalg.LinAlgError:
            return None
        if np.any(np.sign(out[support]) != signs):
            return None
    return out


def solve_deviation(problem: L1QuadProblem, tol: float = 1e-8, max_iter: int | None = None,
                    o0=None, trace: list | None = None) -> DeviationResult:
    """Minimize the L1-penalized quadratic, warm-starting from ``o0`` (zeros by default).

    ``max_iter`` counts coordinate sweeps. If ``trace`` is a list, the objective
    after every accepted step is appended to it.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = problem.m
    if m == 0:
        return DeviationResult(np.zeros(0), 0.0, True, 0, 0.0)
    if max_iter is None:
        max_iter = 10 * m * 100
    Q, r, lam = problem.Q, problem.r, float(problem.lam)
    o = np.zeros(m) if o0 is None else np.array(o0, dtype=float)
    obj = _objective(Q, r, o, lam)
    if trace is not None:
        trace.append(obj)

    sweeps = 0
    block = 4
    kkt = _kkt(Q, r, o, lam)
    while kkt > tol and sweeps < max_iter:
        n = min(block, max_iter - sweeps)
        _cd_sweeps(Q, r, o, lam, n)
        sweeps += n
        obj = _objective(Q, r, o, lam)
        if trace is not None:
            trace.append(obj)
        kkt = _kkt(Q, r, o, lam)
        if kkt <= tol:
            break
        cand = _polish(problem, o)
        if cand is not None:
            cand_obj = _objective(Q, r, cand, lam)
            if cand_obj <= obj:
                cand_kkt = _kkt(Q, r, cand, lam)
                o, obj, kkt = cand, cand_obj, cand_kkt
                if trace is not None:
                    trace.append(obj)
        block = min(2 * block, 64)
    return DeviationResult(o, obj, kkt <= tol, sweeps, kkt)
