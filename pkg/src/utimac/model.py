"""Domain types shared by every stage of the pipeline.

Traffic frames live in the original (non-negative) domain; everything the
solver touches lives in the log domain ``z = ln(x + eps)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PD_FLOOR = 1e-8
# exp(709.78) is the largest finite double
EXP_CAP = 700.0


class DomainError(ValueError):
    """Input outside the domain of a transform or type."""


@dataclass(frozen=True)
class TrafficFrame:
    t: int
    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or x.size < 1:
            raise DomainError(f"frame {self.t}: expected a non-empty vector")
        if not np.all(np.isfinite(x)) or np.any(x < 0):
            raise DomainError(f"frame {self.t}: traffic must be finite and >= 0")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def d(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class ObservationMask:
    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=bool)
        if b.ndim != 1:
            raise DomainError("mask must be a vector")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @property
    def observed(self) -> np.ndarray:
        return np.flatnonzero(self.b)

    @property
    def missing(self) -> np.ndarray:
        return np.flatnonzero(~self.b)

    @property
    def n_observed(self) -> int:
        return int(self.b.sum())

    @classmethod
    def full(cls, d: int) -> "ObservationMask":
        return cls(np.ones(d, dtype=bool))


@dataclass(frozen=True)
class TrafficWindow:
    """Consecutive frames assumed to share one parameter set."""

    frames: tuple
    eps: np.ndarray = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise DomainError("a window needs at least one frame")
        d = frames[0][0].d
        for frame, mask in frames:
            if frame.d != d or mask.b.size != d:
                raise DomainError(f"frame {frame.t}: dimension mismatch (expected {d})")
        eps = np.ones(d) if self.eps is None else np.asarray(self.eps, dtype=float)
        if eps.shape == ():
            eps = np.full(d, float(eps))
        if eps.shape != (d,) or np.any(eps <= 0) or not np.all(np.isfinite(eps)):
            raise DomainError("eps must be a strictly positive d-vector")
        eps.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "eps", eps)

    def __len__(self):
        return len(self.frames)

    @property
    def d(self) -> int:
        return self.frames[0][0].d

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f, _ in self.frames])

    @property
    def masks(self) -> np.ndarray:
        """(L, d) boolean observation matrix."""
        return np.stack([m.b for _, m in self.frames])

    @property
    def traffic(self) -> np.ndarray:
        return np.stack([f.x for f, _ in self.frames])

    def log_values(self) -> np.ndarray:
        """(L, d) log-domain values; entries at missing positions are meaningless."""
        return np.log(self.traffic + self.eps)


@dataclass(frozen=True)
class WindowParams:
    mu: np.ndarray
    sigma: np.ndarray
    lam: float
    rho: float = 1e-2
    eta: float = 1.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        d = mu.size
        if sigma.shape != (d, d):
            raise DomainError("sigma must be d x d")
        if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-10 * max(1.0, np.abs(sigma).max())):
            raise DomainError("sigma must be symmetric")
        if np.linalg.eigvalsh(sigma).min() <= 0:
            raise DomainError("sigma must be positive definite")
        if not (self.lam > 0 and self.rho > 0 and self.eta > 0):
            raise DomainError("lam, rho and eta must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))

    @property
    def d(self) -> int:
        return self.mu.size


@dataclass
class DeviationSet:
    """Per-frame deviations, each stored on that frame's observed indices."""

    values: list = field(default_factory=list)

    @classmethod
    def zeros(cls, window: TrafficWindow) -> "DeviationSet":
        return cls([np.zeros(m.n_observed) for _, m in window.frames])

    def l1(self) -> float:
        return float(sum(np.abs(o).sum() for o in self.values))

    def copy(self) -> "DeviationSet":
        return DeviationSet([o.copy() for o in self.values])

    def dense(self, window: TrafficWindow) -> np.ndarray:
        """(L, d) array with zeros at missing positions."""
        out = np.zeros((len(window), window.d))
        for i, (_, m) in enumerate(window.frames):
            out[i, m.observed] = self.values[i]
        return out


def to_log_domain(x, eps) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise DomainError("traffic must be finite and non-negative")
    if np.any(eps <= 0):
        raise DomainError("eps must be strictly positive")
    return np.log(x + eps)


@dataclass
class InverseResult:
    x: np.ndarray
    saturated: bool


def from_log_domain(z, eps, cap: float = EXP_CAP) -> InverseResult:
    """``max(exp(z) - eps, 0)``, saturating the exponent at ``cap``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("log-domain values must be finite")
    saturated = bool(np.any(z > cap))
    if saturated:
        warnings.warn("exp overflow in inverse transform; saturating", RuntimeWarning, stacklevel=2)
    x = np.exp(np.minimum(z, cap)) - np.asarray(eps, dtype=float)
    return InverseResult(np.maximum(x, 0.0), saturated)


def partition_windows(series: Sequence, window_len: int, eps=None) -> list[TrafficWindow]:
    """Split (frame, mask) pairs into consecutive windows; a short remainder is kept."""
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    series = list(series)
    return [
        TrafficWindow(tuple(series[i:i + window_len]), eps)
        for i in range(0, len(series), window_len)
    ]


def submatrix(sigma, rows, cols) -> np.ndarray:
    sigma = np.asarray(sigma)
    rows = np.asarray(rows, dtype=int).reshape(-1)
    cols = np.asarray(cols, dtype=int).reshape(-1)
    n, k = sigma.shape
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise IndexError("row index out of range")
    if cols.size and (cols.min() < 0 or cols.max() >= k):
        raise IndexError("column index out of range")
    return sigma[np.ix_(rows, cols)]


def floor_eigenvalues(sigma: np.ndarray, floor: float = PD_FLOOR) -> np.ndarray:
    sigma = 0.5 * (sigma + sigma.T)
    w, v = np.linalg.eigh(sigma)
    if w.min() >= floor:
        return sigma
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)
