import numpy as np
import pytest

from utimac.datagen import (
    DataFormatError,
    MaskSpec,
    SynthSpec,
    apply_masks,
    default_spec,
    laplace_inverse_cdf,
    load_csv,
    load_mask_csv,
    make_rng,
    sample_masks,
    sample_series,
    sample_window,
    save_csv,
    save_mask_csv,
)
from utimac.model import DomainError, ObservationMask, TrafficFrame


def test_sampling_is_deterministic():
    spec = default_spec(5, 30, 2, seed=3)
    a, b = sample_series(spec), sample_series(spec)
    for x, y in zip(a, b):
        assert np.array_equal(x.window.traffic, y.window.traffic)
        assert np.array_equal(x.U, y.U) and np.array_equal(x.O, y.O)
    assert not np.array_equal(a[0].U, a[1].U)
    assert a[1].window.times[0] == 30


def test_traffic_follows_latents():
    s = sample_window(default_spec(4, 50, seed=1))
    X = np.maximum(np.exp(s.Z) - 1.0, 0.0)
    np.testing.assert_array_equal(s.window.traffic, X)
    assert s.clamped == int((np.exp(s.Z) - 1.0 < 0).sum())


def test_invalid_spec_rejected():
    with pytest.raises(DomainError):
        SynthSpec(2, 10, 1, np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0)
    with pytest.raises(DomainError):
        SynthSpec(2, 10, 1, np.zeros(2), np.eye(2), 0.0)
    with pytest.raises(DomainError):
        MaskSpec(0.0)


def test_infinite_lambda_is_gaussian():
    d, L = 3, 10_000
    spec = SynthSpec(d, L, 1, [3.0, 4.0, 5.0], np.diag([0.25, 0.5, 1.0]), 1e12, seed=4)
    s = sample_window(spec)
    assert np.all(s.O == 0)
    sd = np.sqrt(np.diag(spec.sigma))
    assert np.all(np.abs(s.Z.mean(0) - spec.mu) < 4 * sd / np.sqrt(L))


def test_tiny_sigma_median():
    L = 20_000
    spec = SynthSpec(2, L, 1, [3.0, 5.0], 1e-6 * np.eye(2), 2.0, seed=5)
    Z = sample_window(spec).Z
    # median of Laplace(0, b) has standard error ~ b / sqrt(L)
    assert np.all(np.abs(np.median(Z, axis=0) - spec.mu) < 4 * 0.5 / np.sqrt(L))


def test_variance_moment():
    d, L, lam = 4, 100_000, 3.0
    rng = np.random.default_rng(6)
    sigma = np.diag(rng.uniform(0.2, 1.0, d))
    spec = SynthSpec(d, L, 1, np.full(d, 4.0), sigma, lam, seed=6)
    var = sample_window(spec).Z.var(axis=0)
    np.testing.assert_allclose(var, np.diag(sigma) + 2 / lam ** 2, rtol=0.05)


def test_laplace_inverse_cdf():
    u = np.array([-0.25, 0.0, 0.25])
    np.testing.assert_allclose(laplace_inverse_cdf(u, 2.0), [-2 * np.log(2), 0.0, 2 * np.log(2)])


def test_masks():
    masks = sample_masks(1000, 1000, MaskSpec(0.5, seed=8))
    frac = np.mean([m.b.mean() for m in masks])
    assert abs(frac - 0.5) < 0.002
    assert all(m.b.all() for m in sample_masks(7, 20, MaskSpec(1.0, seed=8)))
    again = sample_masks(1000, 1000, MaskSpec(0.5, seed=8))
    assert all(np.array_equal(a.b, b.b) for a, b in zip(masks, again))


def test_streams_are_independent():
    # the traffic seed does not influence masks and vice versa
    m1 = sample_masks(4, 10, MaskSpec(0.5, seed=1))
    s1 = sample_window(default_spec(4, 10, seed=1))
    s2 = sample_window(default_spec(4, 10, seed=2))
    assert not np.array_equal(s1.U, s2.U)
    assert all(np.array_equal(a.b, b.b) for a, b in zip(m1, sample_masks(4, 10, MaskSpec(0.5, seed=1))))
    a = make_rng(1, 0x7472).random(5)
    b = make_rng(1, 0x6D61).random(5)
    assert not np.allclose(a, b)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    frames = [TrafficFrame(t, rng.lognormal(2, 3, 5)) for t in range(10)]
    frames[0] = TrafficFrame(0, np.array([0.0, 1e-300, 1e300, 1 / 3, 7.0]))
    path = tmp_path / "x.csv"
    save_csv(frames, path)
    back = load_csv(path)
    for f, (g, m) in zip(frames, back):
        assert f.t == g.t and m.b.all()
        np.testing.assert_allclose(g.x, f.x, rtol=1e-15, atol=0)
    save_csv(back, tmp_path / "y.csv")
    assert (tmp_path / "x.csv").read_bytes() == (tmp_path / "y.csv").read_bytes()


def test_masked_csv_round_trip(tmp_path):
    s = sample_window(default_spec(3, 6, seed=10))
    masks = sample_masks(3, 6, MaskSpec(0.5, seed=10))
    pairs = apply_masks(s.window.frames, masks)
    save_csv(pairs, tmp_path / "t.csv", masked_blank=True)
    save_mask_csv(s.window.times, masks, tmp_path / "m.csv")
    back = load_csv(tmp_path / "t.csv", tmp_path / "m.csv")
    for (f, m), (g, n) in zip(pairs, back):
        assert np.array_equal(m.b, n.b)
        assert np.array_equal(f.x[m.b], g.x[n.b])
    times, masks2 = load_mask_csv(tmp_path / "m.csv")
    assert times == list(s.window.times)


def test_empty_series(tmp_path):
    save_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "t\n"
    assert load_csv(tmp_path / "e.csv") == []


def test_small_file(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,flow_0,flow_1\n0,1.5,2\n1,0,3\n")
    out = load_csv(p)
    assert len(out) == 2
    np.testing.assert_array_equal(out[1][0].x, [0.0, 3.0])


@pytest.mark.parametrize("text,where", [
    ("t,flow_0,flow_1\n0,1,1\n1,1\n", (2, 2)),
    ("t,flow_0,flow_1\n0,1,-1\n", (1, 3)),
    ("t,flow_0,flow_1\n0,1,x\n", (1, 3)),
    ("t,flow_0,flow_1\n0,,1\n", (1, 2)),
])
def test_traffic_errors(tmp_path, text, where):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataFormatError) as info:
        load_csv(p)
    assert (info.value.row, info.value.col) == where


def test_mask_error_location(tmp_path):
    t = tmp_path / "t.csv"
    m = tmp_path / "m.csv"
    t.write_text("t,flow_0,flow_1\n0,1,1\n1,1,1\n2,1,1\n")
    m.write_text("t,flow_0,flow_1\n0,1,1\n1,1,0\n2,2,1\n")
    with pytest.raises(DataFormatError, match=r"\(3,2\)") as info:
        load_csv(t, m)
    assert (info.value.row, info.value.col) == (3, 2)


def test_geant_shaped_file(tmp_path):
    rng = np.random.default_rng(11)
    frames = [TrafficFrame(t, rng.exponential(1e6, 484)) for t in range(3)]
    save_csv(frames, tmp_path / "g.csv")
    back = load_csv(tmp_path / "g.csv")
    assert back[0][0].d == 484
    save_csv(back, tmp_path / "g2.csv")
    assert (tmp_path / "g.csv").read_bytes() == (tmp_path / "g2.csv").read_bytes()


def test_full_mask_helper():
    assert ObservationMask.full(3).b.all()
