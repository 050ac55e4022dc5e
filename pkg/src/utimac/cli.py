"""Command-line front end: simulate, complete, evaluate, diagnose.

Every option can also be given in a JSON config (``--config``); command-line
flags win over config keys, which win over built-in defaults. Keys may sit at
the top level or in a section named after the command.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bcd import FitConfig, FitError, fit_window
from .datagen import (
    DataFormatError,
    MaskSpec,
    SynthSpec,
    apply_masks,
    default_spec,
    load_csv,
    load_mask_csv,
    sample_masks,
    sample_series,
    save_csv,
    save_mask_csv,
)
from .diagnostics import qq_chi2
from .metrics import BurstConfig, EvalInput, MetricError, report
from .model import DomainError, partition_windows
from .uncertainty import DEFAULT_LEVEL, complete_window

log = logging.getLogger("utimac")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4

DEFAULTS = {
    "simulate": {
        "d": 8, "L": 200, "n_windows": 1, "lam": 5.0, "seed": None, "mask_seed": None,
        "p_obs": [0.5], "eps": 1.0, "mu": None, "sigma": None, "out": None,
    },
    "complete": {
        "traffic": None, "mask": None, "out": None, "window_len": 200, "level": DEFAULT_LEVEL,
        "eps": 1.0, "rho": 1e-2, "eta": 1.0, "outer_max_iter": 50, "outer_rel_tol": 1e-6,
        "inner_tol": 1e-8, "pd_floor": 1e-8, "damping": 1.0, "jobs": 1,
    },
    "evaluate": {
        "truth": None, "completed": None, "mask": None, "intervals": None, "out": None,
        "alpha": 2.0, "beta": 0.8, "eps_metric": 1e-9,
    },
    "diagnose": {
        "traffic": None, "mask": None, "out": None, "window_len": 200, "eps": 1.0, "raw": False,
    },
}


class ConfigError(ValueError):
    pass


def _setup_logging():
    level = os.environ.get("UTIMAC_LOG", "quiet").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        for key, value in doc.items():
            if key in cfg:
                cfg[key] = value
        section = doc.get(command, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {command!r} must be an object")
        unknown = set(section) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown keys in section {command!r}: {sorted(unknown)}")
        cfg.update(section)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) in (None, ""):
            raise ConfigError(f"missing required option {key!r}")


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _p_label(p: float) -> str:
    return f"{p:g}"


def cmd_simulate(cfg: dict) -> int:
    _require(cfg, "out", "seed")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    mask_seed = seed if cfg["mask_seed"] is None else int(cfg["mask_seed"])
    d, L, nw = int(cfg["d"]), int(cfg["L"]), int(cfg["n_windows"])
    if cfg["mu"] is not None and cfg["sigma"] is not None:
        spec = SynthSpec(d, L, nw, cfg["mu"], cfg["sigma"], float(cfg["lam"]), cfg["eps"], seed)
    else:
        spec = default_spec(d, L, nw, float(cfg["lam"]), seed)
        spec.eps = np.broadcast_to(np.asarray(cfg["eps"], dtype=float), (d,)).copy()
    windows = sample_series(spec)
    frames = [f for w in windows for f, _ in w.window.frames]
    times = [f.t for f in frames]
    save_csv(frames, out / "truth.csv")
    rates = cfg["p_obs"]
    rates = [rates] if np.isscalar(rates) else list(rates)
    sweep = len(rates) > 1
    for p in rates:
        masks = sample_masks(d, len(frames), MaskSpec(float(p), mask_seed))
        suffix = f"_p{_p_label(float(p))}" if sweep else ""
        save_mask_csv(times, masks, out / f"mask{suffix}.csv")
        save_csv(apply_masks(frames, masks), out / f"traffic{suffix}.csv", masked_blank=True)
    clamped = sum(w.clamped for w in windows)
    log.info("simulated %d frames (d=%d), %d entries clamped at zero", len(frames), d, clamped)
    return EXIT_OK


def _fit_one(job):
    index, window, fit_cfg, level = job
    entry = {
        "index": index,
        "t_start": int(window.times[0]),
        "t_end": int(window.times[-1]),
        "n_frames": len(window),
        "n_missing": int((~window.masks).sum()),
    }
    if entry["n_missing"] == 0:
        entry["status"] = "nothing to impute"
        return entry, window.traffic, []
    try:
        fit = fit_window(window, fit_cfg)
    except FitError as exc:
        entry["status"] = "error"
        entry["error"] = str(exc)
        return entry, None, []
    comp = complete_window(window, fit, level)
    entry.update({
        "status": "fitted",
        "converged": fit.converged,
        "iterations": fit.iterations,
        "objective_trace": [float(v) for v in fit.objective_trace],
        "lambda": float(fit.params.lam),
        "never_observed": [int(j) for j in fit.never_observed],
        "inner_nonconverged": fit.inner_nonconverged,
        "sigma_rejected": fit.sigma_rejected,
    })
    return entry, comp.completed, comp.intervals


def complete_series(series, window_len: int, fit_cfg: FitConfig, level: float, eps=1.0, jobs: int = 1):
    windows = partition_windows(series, window_len, eps)
    jobs_list = [(i, w, fit_cfg, level) for i, w in enumerate(windows)]
    if jobs > 1 and len(windows) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_one, jobs_list))
    else:
        results = [_fit_one(j) for j in jobs_list]
    return windows, results


def _write_completed(path: Path, windows, results):
    d = windows[0].d
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"flow_{k}" for k in range(d)])
        for window, (_, completed, _) in zip(windows, results):
            masks = window.masks
            for i, t in enumerate(window.times):
                if completed is None:
                    row = [format(v, ".17g") if masks[i, k] else "" for k, v in enumerate(window.traffic[i])]
                else:
                    row = [format(float(v), ".17g") for v in completed[i]]
                w.writerow([str(int(t))] + row)


def _write_intervals(path: Path, results):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "flow", "point", "lower", "upper", "level"])
        for _, _, rows in results:
            for t, j, point, lower, upper, level in rows:
                w.writerow([t, j, format(point, ".17g"), format(lower, ".17g"),
                            format(upper, ".17g"), format(level, "g")])


def cmd_complete(cfg: dict) -> int:
    _require(cfg, "traffic", "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    series = load_csv(cfg["traffic"], cfg["mask"])
    if not series:
        raise DataFormatError(f"{cfg['traffic']}: no frames")
    fit_cfg = FitConfig(
        outer_max_iter=int(cfg["outer_max_iter"]), outer_rel_tol=float(cfg["outer_rel_tol"]),
        inner_tol=float(cfg["inner_tol"]), rho=float(cfg["rho"]), eta=float(cfg["eta"]),
        pd_floor=float(cfg["pd_floor"]), damping=float(cfg["damping"]),
    )
    level = float(cfg["level"])
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    windows, results = complete_series(series, int(cfg["window_len"]), fit_cfg, level,
                                       cfg["eps"], int(cfg["jobs"]))
    _write_completed(out / "completed.csv", windows, results)
    _write_intervals(out / "intervals.csv", results)
    entries = [r[0] for r in results]
    doc = {
        "version": __version__,
        "level": level,
        "window_len": int(cfg["window_len"]),
        "fit_config": {k: cfg[k] for k in ("rho", "eta", "outer_max_iter", "outer_rel_tol",
                                           "inner_tol", "pd_floor", "damping")},
        "nothing_to_impute": all(e["status"] == "nothing to impute" for e in entries),
        "windows": entries,
    }
    _dump_json(doc, out / "report.json")
    if any(e["status"] == "error" for e in entries):
        for e in entries:
            if e["status"] == "error":
                log.error("window %d: %s", e["index"], e["error"])
        return EXIT_DATA
    if any(e["status"] == "fitted" and not e["converged"] for e in entries):
        log.warning("some windows reached the iteration limit before converging")
        return EXIT_CONVERGENCE
    return EXIT_OK


def _load_matrix(path, times, d):
    try:
        series = load_csv(path)
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    X = np.stack([f.x for f, _ in series]) if series else np.zeros((0, d))
    if [f.t for f, _ in series] != list(times):
        raise DataFormatError(f"{path}: time index does not match the mask file")
    if X.shape[1] != d:
        raise DataFormatError(f"{path}: {X.shape[1]} flows, expected {d}")
    return X


def _load_intervals(path, times, d):
    pos = {t: i for i, t in enumerate(times)}
    lower = np.full((len(times), d), np.nan)
    upper = np.full((len(times), d), np.nan)
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for r, row in enumerate(reader, start=1):
            try:
                i, j = pos[int(row["t"])], int(row["flow"])
                lower[i, j] = float(row["lower"])
                upper[i, j] = float(row["upper"])
            except (KeyError, ValueError, IndexError, TypeError) as exc:
                raise DataFormatError(f"{path}: bad interval row ({exc})", r, None) from None
    return lower, upper


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "truth", "completed", "mask", "out")
    times, masks = load_mask_csv(cfg["mask"])
    observed = np.stack([m.b for m in masks])
    d = observed.shape[1]
    truth = _load_matrix(cfg["truth"], times, d)
    completed = _load_matrix(cfg["completed"], times, d)
    lower = upper = None
    if cfg["intervals"]:
        lower, upper = _load_intervals(cfg["intervals"], times, d)
    inp = EvalInput(truth, completed, observed, lower, upper, float(cfg["eps_metric"]))
    doc = report(inp, BurstConfig(float(cfg["alpha"]), float(cfg["beta"])))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(doc, out)
    return EXIT_OK


def cmd_diagnose(cfg: dict) -> int:
    _require(cfg, "traffic", "out")
    series = load_csv(cfg["traffic"], cfg["mask"])
    windows = partition_windows(series, int(cfg["window_len"]), cfg["eps"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    errors = []
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "k", "observed_d2", "theoretical_q"])
        for n, window in enumerate(windows):
            full = window.masks.all(axis=1)
            data = window.traffic[full] if cfg["raw"] else window.log_values()[full]
            try:
                qq = qq_chi2(data, use_sample_moments=True)
            except DomainError as exc:
                errors.append({"window": n, "error": str(exc)})
                log.error("window %d: %s", n, exc)
                continue
            for k, (o, q) in enumerate(zip(qq.ordered_d2, qq.theoretical_q), start=1):
                w.writerow([n, k, format(float(o), ".17g"), format(float(q), ".17g")])
    if errors:
        _dump_json({"errors": errors}, out.with_suffix(".errors.json"))
        return EXIT_DATA
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "complete": cmd_complete,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="utimac", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config document")
        return p

    p = add("simulate", "draw synthetic traffic, truth and masks")
    p.add_argument("--out", help="output directory")
    p.add_argument("--d", type=int)
    p.add_argument("--L", type=int, help="frames per window")
    p.add_argument("--n-windows", dest="n_windows", type=int)
    p.add_argument("--lam", type=float, help="Laplace rate of the deviation component")
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-seed", dest="mask_seed", type=int)
    p.add_argument("--p-obs", dest="p_obs", type=_float_list,
                   help="observation rate, or comma-separated rates for a sweep")
    p.add_argument("--eps", type=float)

    p = add("complete", "fit each window and impute missing entries")
    p.add_argument("--traffic")
    p.add_argument("--mask")
    p.add_argument("--out", help="output directory")
    p.add_argument("--window-len", dest="window_len", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--outer-max-iter", dest="outer_max_iter", type=int)
    p.add_argument("--outer-rel-tol", dest="outer_rel_tol", type=float)
    p.add_argument("--inner-tol", dest="inner_tol", type=float)
    p.add_argument("--pd-floor", dest="pd_floor", type=float)
    p.add_argument("--damping", type=float)
    p.add_argument("--jobs", type=int)

    p = add("evaluate", "compute imputation metrics on missing entries")
    p.add_argument("--truth")
    p.add_argument("--completed")
    p.add_argument("--mask")
    p.add_argument("--intervals")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--eps-metric", dest="eps_metric", type=float)

    p = add("diagnose", "Mahalanobis chi-square QQ data per window")
    p.add_argument("--traffic")
    p.add_argument("--mask")
    p.add_argument("--out", help="QQ CSV path")
    p.add_argument("--window-len", dest="window_len", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--raw", action="store_const", const=True, default=None,
                   help="skip the log transform")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, TypeError, KeyError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataFormatError, DomainError, MetricError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
