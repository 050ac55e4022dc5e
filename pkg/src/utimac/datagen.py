"""Synthetic traffic from the log-domain Gaussian-plus-Laplace model, masks, CSV I/O.

Randomness comes from numpy's Philox4x64 counter-based generator. Traffic and
masks use separate streams keyed by ``(seed, stream tag, window index)`` so a
mask drawn under a fixed seed is shared across different traffic draws.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DomainError, ObservationMask, TrafficFrame, TrafficWindow

TRAFFIC_STREAM = 0x7472
MASK_STREAM = 0x6D61
LAMBDA_INF = 1e12


class DataFormatError(ValueError):
    def __init__(self, msg, row=None, col=None):
        where = f" at ({row},{col})" if row is not None else ""
        super().__init__(f"{msg}{where}")
        self.row = row
        self.col = col


def make_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, index])))


@dataclass
class SynthSpec:
    d: int
    L: int
    n_windows: int
    mu: np.ndarray
    sigma: np.ndarray
    lam: float
    eps: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.eps = np.ones(self.d) if self.eps is None else np.broadcast_to(
            np.asarray(self.eps, dtype=float), (self.d,)).copy()
        if self.mu.shape != (self.d,) or self.sigma.shape != (self.d, self.d):
            raise DomainError("mu/sigma shapes do not match d")
        if not np.allclose(self.sigma, self.sigma.T) or np.linalg.eigvalsh(self.sigma).min() <= 0:
            raise DomainError("sigma must be symmetric positive definite")
        if not self.lam > 0:
            raise DomainError("lambda must be positive")
        if self.L < 1 or self.n_windows < 1:
            raise DomainError("L and n_windows must be >= 1")


@dataclass
class MaskSpec:
    p_obs: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p_obs <= 1:
            raise DomainError("p_obs must lie in (0, 1]")


def random_correlation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Random correlation matrix: Wishart-style draw plus a ridge, rescaled to unit diagonal."""
    A = rng.standard_normal((d, d))
    S = A @ A.T / d + 0.5 * np.eye(d)
    s = np.sqrt(np.diag(S))
    S = S / np.outer(s, s)
    return 0.5 * (S + S.T)


def default_spec(d: int, L: int, n_windows: int = 1, lam: float = 5.0, seed: int = 0,
                 mu_range=(2.0, 5.0)) -> SynthSpec:
    """SynthSpec with mean drawn uniformly from ``mu_range`` and a random correlation covariance."""
    rng = make_rng(seed, 0x7061)
    mu = rng.uniform(*mu_range, size=d)
    return SynthSpec(d, L, n_windows, mu, random_correlation(d, rng), lam, seed=seed)


def laplace_inverse_cdf(u: np.ndarray, b: float) -> np.ndarray:
    """Map uniforms on (-1/2, 1/2) to Laplace(0, b)."""
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


@dataclass
class SampledWindow:
    window: TrafficWindow
    U: np.ndarray
    O: np.ndarray
    clamped: int = 0

    @property
    def Z(self):
        return self.U + self.O


def sample_window(spec: SynthSpec, index: int = 0, t0: int | None = None) -> SampledWindow:
    """Draw one window of ``spec.L`` fully observed frames plus their latents."""
    rng = make_rng(spec.seed, TRAFFIC_STREAM, index)
    chol = np.linalg.cholesky(spec.sigma)
    U = spec.mu + rng.standard_normal((spec.L, spec.d)) @ chol.T
    u = rng.random((spec.L, spec.d)) - 0.5
    if spec.lam >= LAMBDA_INF:
        O = np.zeros_like(U)
    else:
        O = laplace_inverse_cdf(u, 1.0 / spec.lam)
    X = np.exp(U + O) - spec.eps
    clamped = int((X < 0).sum())
    X = np.maximum(X, 0.0)
    if t0 is None:
        t0 = index * spec.L
    full = ObservationMask.full(spec.d)
    frames = tuple((TrafficFrame(t0 + i, X[i]), full) for i in range(spec.L))
    return SampledWindow(TrafficWindow(frames, spec.eps), U, O, clamped)


def sample_series(spec: SynthSpec) -> list[SampledWindow]:
    return [sample_window(spec, n) for n in range(spec.n_windows)]


def sample_masks(d: int, L: int, spec: MaskSpec) -> list[ObservationMask]:
    rng = make_rng(spec.seed, MASK_STREAM)
    bits = rng.random((L, d)) < spec.p_obs
    return [ObservationMask(row) for row in bits]


def apply_masks(frames, masks) -> list:
    """Pair frames with masks; accepts bare frames or (frame, mask) pairs."""
    out = []
    for f, m in zip(frames, masks):
        if isinstance(f, tuple):
            f = f[0]
        out.append((f, m))
    return out


def _header(d: int) -> list[str]:
    return ["t"] + [f"flow_{k}" for k in range(d)]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(frames, path, masked_blank: bool = False) -> None:
    """Write a traffic CSV. With ``masked_blank`` unobserved cells are left empty."""
    rows = [f if isinstance(f, tuple) else (f, None) for f in frames]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not rows:
            w.writerow(["t"])
            return
        w.writerow(_header(rows[0][0].d))
        for frame, mask in rows:
            cells = [_fmt(v) for v in frame.x]
            if masked_blank and mask is not None:
                cells = [c if b else "" for c, b in zip(cells, mask.b)]
            w.writerow([str(frame.t)] + cells)


def save_mask_csv(times, masks, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        masks = list(masks)
        w.writerow(_header(masks[0].b.size) if masks else ["t"])
        for t, m in zip(times, masks):
            w.writerow([str(int(t))] + ["1" if b else "0" for b in m.b])


def _read_rows(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0] != "t":
        raise DataFormatError(f"{path}: header must start with 't'", 0, 1)
    d = len(header) - 1
    for k, name in enumerate(header[1:]):
        if name != f"flow_{k}":
            raise DataFormatError(f"{path}: unexpected column name {name!r}", 0, k + 2)
    body = rows[1:]
    for r, row in enumerate(body, start=1):
        if len(row) != d + 1:
            raise DataFormatError(f"{path}: ragged row ({len(row)} cells, expected {d + 1})", r, len(row))
    return d, body


def _parse_time(cell, path, r):
    try:
        return int(cell)
    except ValueError:
        raise DataFormatError(f"{path}: bad time index {cell!r}", r, 1) from None


def load_mask_csv(path):
    d, body = _read_rows(path)
    times, masks = [], []
    for r, row in enumerate(body, start=1):
        times.append(_parse_time(row[0], path, r))
        bits = []
        for c, cell in enumerate(row[1:], start=2):
            if cell.strip() not in ("0", "1"):
                raise DataFormatError(f"{path}: mask value {cell!r} not in {{0,1}}", r, c)
            bits.append(cell.strip() == "1")
        masks.append(ObservationMask(np.array(bits, dtype=bool)))
    return times, masks


def load_csv(traffic_path, mask_path=None) -> list:
    """Parse a traffic CSV (and optional mask CSV) into (frame, mask) pairs.

    Empty traffic cells are allowed only where the mask marks the entry missing.
    """
    d, body = _read_rows(traffic_path)
    if mask_path is not None:
        mtimes, masks = load_mask_csv(mask_path)
        if len(masks) != len(body):
            raise DataFormatError(f"{mask_path}: {len(masks)} rows but traffic has {len(body)}")
        if masks and masks[0].b.size != d:
            raise DataFormatError(f"{mask_path}: {masks[0].b.size} flows but traffic has {d}")
    else:
        masks = [ObservationMask.full(d) for _ in body]
    out = []
    for r, row in enumerate(body, start=1):
        t = _parse_time(row[0], traffic_path, r)
        if mask_path is not None and mtimes[r - 1] != t:
            raise DataFormatError(f"{mask_path}: time index {mtimes[r - 1]} does not match {t}", r, 1)
        x = np.empty(d)
        for c, cell in enumerate(row[1:], start=2):
            if cell.strip() == "":
                if masks[r - 1].b[c - 2]:
                    raise DataFormatError(f"{traffic_path}: empty cell at an observed entry", r, c)
                x[c - 2] = 0.0
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataFormatError(f"{traffic_path}: not a number {cell!r}", r, c) from None
            if not np.isfinite(v) or v < 0:
                raise DataFormatError(f"{traffic_path}: traffic must be finite and >= 0, got {cell!r}", r, c)
            x[c - 2] = v
        out.append((TrafficFrame(t, x), masks[r - 1]))
    return out
