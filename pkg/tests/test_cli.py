import csv
import json

import numpy as np
import pytest

from utimac.cli import EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_DATA, EXIT_OK, main
from utimac.datagen import SynthSpec, sample_window, save_csv, save_mask_csv
from utimac.model import ObservationMask, TrafficFrame


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--d", "6", "--L", "60", "--n-windows", "2",
                 "--seed", "7", "--p-obs", "0.6"]) == EXIT_OK
    return out


def test_simulate_writes_three_files_deterministically(sim, tmp_path):
    for name in ("truth.csv", "mask.csv", "traffic.csv"):
        assert (sim / name).exists()
    assert main(["simulate", "--out", str(tmp_path), "--d", "6", "--L", "60", "--n-windows", "2",
                 "--seed", "7", "--p-obs", "0.6"]) == EXIT_OK
    for name in ("truth.csv", "mask.csv", "traffic.csv"):
        assert (sim / name).read_bytes() == (tmp_path / name).read_bytes()
    rows = read_rows(sim / "truth.csv")
    assert rows[0] == ["t"] + [f"flow_{k}" for k in range(6)] and len(rows) == 121


def test_simulate_full_observation(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--d", "3", "--L", "10", "--seed", "1",
                 "--p-obs", "1.0"]) == EXIT_OK
    body = read_rows(tmp_path / "mask.csv")[1:]
    assert all(cell == "1" for row in body for cell in row[1:])


def test_simulate_sweep_shares_traffic(tmp_path):
    rates = "0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    assert main(["simulate", "--out", str(tmp_path), "--d", "4", "--L", "50", "--seed", "2",
                 "--p-obs", rates]) == EXIT_OK
    truth = read_rows(tmp_path / "truth.csv")
    fractions = []
    for p in rates.split(","):
        mask = read_rows(tmp_path / f"mask_p{p}.csv")
        traffic = read_rows(tmp_path / f"traffic_p{p}.csv")
        ones = [c == "1" for row in mask[1:] for c in row[1:]]
        fractions.append(np.mean(ones))
        for trow, xrow, mrow in zip(truth[1:], traffic[1:], mask[1:]):
            for a, b, m in zip(trow[1:], xrow[1:], mrow[1:]):
                assert b == (a if m == "1" else "")
    assert fractions == sorted(fractions)


def test_pipeline_and_evaluate(sim, tmp_path):
    out = tmp_path / "fit"
    code = main(["complete", "--traffic", str(sim / "traffic.csv"), "--mask", str(sim / "mask.csv"),
                 "--out", str(out), "--window-len", "60"])
    assert code in (EXIT_OK, EXIT_CONVERGENCE)
    rep = json.loads((out / "report.json").read_text())
    assert len(rep["windows"]) == 2
    for w in rep["windows"]:
        assert w["status"] == "fitted"
        trace = w["objective_trace"]
        assert all(b <= a + 1e-9 * max(1, abs(a)) for a, b in zip(trace, trace[1:]))
    assert code == (EXIT_OK if all(w["converged"] for w in rep["windows"]) else EXIT_CONVERGENCE)

    completed = read_rows(out / "completed.csv")
    traffic = read_rows(sim / "traffic.csv")
    for crow, xrow in zip(completed[1:], traffic[1:]):
        for c, x in zip(crow[1:], xrow[1:]):
            assert c != "" and (x == "" or c == x)
    intervals = read_rows(out / "intervals.csv")
    assert intervals[0] == ["t", "flow", "point", "lower", "upper", "level"]
    n_missing = sum(x == "" for row in traffic[1:] for x in row[1:])
    assert len(intervals) - 1 == n_missing

    base = ["evaluate", "--truth", str(sim / "truth.csv"), "--completed", str(out / "completed.csv"),
            "--mask", str(sim / "mask.csv")]
    assert main(base + ["--out", str(tmp_path / "m1.json")]) == EXIT_OK
    m1 = json.loads((tmp_path / "m1.json").read_text())
    assert "picp" not in m1 and m1["n_missing"] == n_missing
    assert main(base + ["--intervals", str(out / "intervals.csv"), "--out", str(tmp_path / "m2.json")]) == EXIT_OK
    m2 = json.loads((tmp_path / "m2.json").read_text())
    assert 0 <= m2["picp"] <= 1 and m2["mae"] == m1["mae"]
    assert m2["alpha"] == 2.0 and m2["beta"] == 0.8


def test_evaluate_perfect_completion(sim, tmp_path):
    assert main(["evaluate", "--truth", str(sim / "truth.csv"), "--completed", str(sim / "truth.csv"),
                 "--mask", str(sim / "mask.csv"), "--out", str(tmp_path / "m.json")]) == EXIT_OK
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["mae"] == m["rmse"] == m["wmape"] == 0.0


def test_evaluate_shape_mismatch_names_file(sim, tmp_path, caplog):
    short = tmp_path / "short.csv"
    rows = read_rows(sim / "truth.csv")[:5]
    short.write_text("\n".join(",".join(r) for r in rows) + "\n")
    code = main(["evaluate", "--truth", str(sim / "truth.csv"), "--completed", str(short),
                 "--mask", str(sim / "mask.csv"), "--out", str(tmp_path / "m.json")])
    assert code == EXIT_DATA
    assert "short.csv" in caplog.text


def test_complete_fully_observed(tmp_path):
    rng = np.random.default_rng(3)
    frames = [TrafficFrame(t, rng.lognormal(2, 1, 3)) for t in range(20)]
    save_csv(frames, tmp_path / "x.csv")
    out = tmp_path / "out"
    assert main(["complete", "--traffic", str(tmp_path / "x.csv"), "--out", str(out)]) == EXIT_OK
    assert (out / "completed.csv").read_bytes() == (tmp_path / "x.csv").read_bytes()
    rep = json.loads((out / "report.json").read_text())
    assert rep["nothing_to_impute"] and rep["windows"][0]["status"] == "nothing to impute"
    assert len(read_rows(out / "intervals.csv")) == 1


def test_complete_reports_unobserved_window_and_continues(tmp_path):
    frames = [TrafficFrame(t, np.full(2, 5.0)) for t in range(8)]
    masks = [ObservationMask.full(2)] * 4 + [ObservationMask(np.array([True, False]))] * 2 \
        + [ObservationMask(np.zeros(2, bool))] * 2
    save_csv(list(zip(frames, masks)), tmp_path / "x.csv", masked_blank=True)
    save_mask_csv(range(8), masks, tmp_path / "m.csv")
    out = tmp_path / "out"
    code = main(["complete", "--traffic", str(tmp_path / "x.csv"), "--mask", str(tmp_path / "m.csv"),
                 "--out", str(out), "--window-len", "2"])
    assert code == EXIT_DATA
    statuses = [w["status"] for w in json.loads((out / "report.json").read_text())["windows"]]
    assert statuses == ["nothing to impute", "nothing to impute", "fitted", "error"]


def test_convergence_warning_exit_code(sim, tmp_path):
    code = main(["complete", "--traffic", str(sim / "traffic.csv"), "--mask", str(sim / "mask.csv"),
                 "--out", str(tmp_path), "--window-len", "60", "--outer-max-iter", "1"])
    assert code == EXIT_CONVERGENCE


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "d": 3, "simulate": {"d": 4, "L": 7, "p_obs": 1.0}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert len(read_rows(tmp_path / "a" / "truth.csv")[0]) == 5
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--d", "2"]) == EXIT_OK
    rows = read_rows(tmp_path / "b" / "truth.csv")
    assert len(rows[0]) == 3 and len(rows) == 8


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"simulate": {"bogus": 1}}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["simulate", "--out", str(tmp_path)]) == EXIT_CONFIG  # no seed
    (tmp_path / "broken.json").write_text("{")
    assert main(["simulate", "--config", str(tmp_path / "broken.json")]) == EXIT_CONFIG
    assert main(["simulate", "--out", str(tmp_path), "--seed", "1", "--p-obs", "1.5"]) != EXIT_OK
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("t,flow_0\n0,-1\n")
    assert main(["complete", "--traffic", str(p), "--out", str(tmp_path / "o")]) == EXIT_DATA


def _write_qq_input(tmp_path, X):
    save_csv([TrafficFrame(t, x) for t, x in enumerate(X)], tmp_path / "x.csv")
    return str(tmp_path / "x.csv")


def test_diagnose_gaussian_log_domain(tmp_path):
    spec = SynthSpec(4, 2000, 1, np.full(4, 6.0), 0.3 * np.eye(4) + 0.1, 1e12, seed=4)
    X = sample_window(spec).window.traffic
    out = tmp_path / "qq.csv"
    assert main(["diagnose", "--traffic", _write_qq_input(tmp_path, X), "--out", str(out),
                 "--window-len", "2000"]) == EXIT_OK
    rows = read_rows(out)
    assert rows[0] == ["window", "k", "observed_d2", "theoretical_q"] and len(rows) == 2001
    o = np.array([float(r[2]) for r in rows[1:]])
    q = np.array([float(r[3]) for r in rows[1:]])
    assert np.abs(o - q)[100:1900].max() < 0.6


def test_diagnose_raw_heavy_tail(tmp_path):
    spec = SynthSpec(8, 200, 1, np.full(8, 3.0), np.eye(8), 1e12, seed=5)
    X = sample_window(spec).window.traffic
    out = tmp_path / "qq.csv"
    assert main(["diagnose", "--traffic", _write_qq_input(tmp_path, X), "--out", str(out), "--raw"]) == EXIT_OK
    rows = read_rows(out)[1:]
    o, q = float(rows[-1][2]), float(rows[-1][3])
    assert o > 1.2 * q


def test_diagnose_small_window_error(tmp_path):
    X = np.random.default_rng(6).lognormal(2, 1, (12, 8))
    out = tmp_path / "qq.csv"
    code = main(["diagnose", "--traffic", _write_qq_input(tmp_path, X), "--out", str(out),
                 "--window-len", "6"])
    assert code == EXIT_DATA
    errors = json.loads((tmp_path / "qq.errors.json").read_text())["errors"]
    assert [e["window"] for e in errors] == [0, 1]
