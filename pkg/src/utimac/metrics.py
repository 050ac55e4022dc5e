"""Imputation metrics, pooled over all missing positions of all frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-9


class MetricError(ValueError):
    pass


@dataclass
class BurstConfig:
    alpha: float = 2.0
    beta: float = 0.8

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError("alpha must exceed 1")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")


@dataclass
class EvalInput:
    """Aligned (T, d) arrays; ``observed`` is True where the entry was observed.

    ``lower``/``upper`` hold interval bounds at missing positions (NaN elsewhere).
    """

    truth: np.ndarray
    imputed: np.ndarray
    observed: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    eps_metric: float = DEFAULT_EPS

    def __post_init__(self):
        self.truth = np.atleast_2d(np.asarray(self.truth, dtype=float))
        self.imputed = np.atleast_2d(np.asarray(self.imputed, dtype=float))
        self.observed = np.atleast_2d(np.asarray(self.observed, dtype=bool))
        if not self.truth.shape == self.imputed.shape == self.observed.shape:
            raise MetricError("truth, imputed and mask shapes differ")
        if not self.eps_metric > 0:
            raise MetricError("eps_metric must be positive")
        if (self.lower is None) != (self.upper is None):
            raise MetricError("interval bounds must be given together")
        if self.lower is not None:
            self.lower = np.atleast_2d(np.asarray(self.lower, dtype=float))
            self.upper = np.atleast_2d(np.asarray(self.upper, dtype=float))

    @property
    def missing(self) -> np.ndarray:
        return ~self.observed


def _pooled(truth, imputed, sel, eps):
    n = int(sel.sum())
    err = (imputed - truth)[sel]
    mae = float(np.abs(err).sum() / n)
    rmse = float(np.sqrt((err ** 2).sum() / n))
    wmape = float(np.abs(err).sum() / (np.abs(truth[sel]).sum() + eps))
    return mae, rmse, wmape


def overall_metrics(inp: EvalInput):
    """(MAE, RMSE, wMAPE) over every missing position."""
    if not inp.missing.any():
        raise MetricError("no missing entries to evaluate")
    return _pooled(inp.truth, inp.imputed, inp.missing, inp.eps_metric)


def burst_set(frame, cfg: BurstConfig | None = None) -> np.ndarray:
    """Indices whose dominance ratio over the other flows reaches ``beta``."""
    cfg = cfg or BurstConfig()
    x = np.asarray(frame, dtype=float)
    d = x.size
    if d < 2:
        raise MetricError("burst detection needs at least two flows")
    return np.flatnonzero(burst_mask(x[None, :], cfg)[0])


def burst_mask(frames, cfg: BurstConfig) -> np.ndarray:
    """Boolean (T, d) burst indicator for a stack of frames."""
    x = np.atleast_2d(np.asarray(frames, dtype=float))
    d = x.shape[1]
    if d < 2:
        raise MetricError("burst detection needs at least two flows")
    # dom[t, k, l] = x[t, k] >= alpha * x[t, l]
    dom = x[:, :, None] >= cfg.alpha * x[:, None, :]
    idx = np.arange(d)
    dom[:, idx, idx] = False
    ratio = dom.sum(axis=2) / (d - 1)
    return ratio >= cfg.beta


def _burst_sets(inp: EvalInput, cfg: BurstConfig):
    true_b = burst_mask(inp.truth, cfg) & inp.missing
    pred_b = burst_mask(inp.imputed, cfg) & inp.missing
    return true_b, pred_b


def burst_detection(inp: EvalInput, cfg: BurstConfig | None = None):
    """Pooled (precision, recall, F1) of burst detection at missing positions."""
    cfg = cfg or BurstConfig()
    true_b, pred_b = _burst_sets(inp, cfg)
    eps = inp.eps_metric
    tp = float((true_b & pred_b).sum())
    precision = tp / (pred_b.sum() + eps)
    recall = tp / (true_b.sum() + eps)
    f1 = 2 * precision * recall / (precision + recall + eps)
    return precision, recall, f1


def prf_from_counts(tp: float, fp: float, fn: float, eps: float = DEFAULT_EPS):
    precision = tp / (tp + fp + eps)
    recall = tp / (tp + fn + eps)
    return precision, recall, 2 * precision * recall / (precision + recall + eps)


def burst_metrics(inp: EvalInput, cfg: BurstConfig | None = None):
    """Pooled errors at true missing burst positions; ``None`` when there are none."""
    cfg = cfg or BurstConfig()
    true_b, _ = _burst_sets(inp, cfg)
    if not true_b.any():
        return None
    return _pooled(inp.truth, inp.imputed, true_b, inp.eps_metric)


def picp(inp: EvalInput) -> float:
    """Fraction of missing truths inside their interval."""
    if inp.lower is None:
        raise MetricError("intervals are required for PICP")
    sel = inp.missing
    if not sel.any():
        raise MetricError("no missing entries to evaluate")
    lo, hi = inp.lower[sel], inp.upper[sel]
    if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
        raise MetricError("some missing entries have no interval")
    t = inp.truth[sel]
    return float(np.mean((lo <= t) & (t <= hi)))


def report(inp: EvalInput, cfg: BurstConfig | None = None) -> dict:
    """Metrics document; not-applicable values are ``None``."""
    cfg = cfg or BurstConfig()
    mae, rmse, wmape = overall_metrics(inp)
    precision, recall, f1 = burst_detection(inp, cfg)
    bm = burst_metrics(inp, cfg)
    true_b, _ = _burst_sets(inp, cfg)
    out = {
        "mae": mae,
        "rmse": rmse,
        "wmape": wmape,
        "burst": {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "mae": None if bm is None else bm[0],
            "rmse": None if bm is None else bm[1],
            "wmape": None if bm is None else bm[2],
        },
        "n_missing": int(inp.missing.sum()),
        "n_burst_missing": int(true_b.sum()),
        "alpha": cfg.alpha,
        "beta": cfg.beta,
    }
    if inp.lower is not None:
        out["picp"] = picp(inp)
    return out
