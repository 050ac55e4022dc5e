import numpy as np
import pytest

from utimac.model import ObservationMask, TrafficFrame, TrafficWindow


def make_window(X, M=None, eps=1.0, t0=0):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if M is None:
        M = np.ones_like(X, dtype=bool)
    M = np.atleast_2d(np.asarray(M, dtype=bool))
    frames = tuple(
        (TrafficFrame(t0 + i, X[i]), ObservationMask(M[i])) for i in range(X.shape[0])
    )
    return TrafficWindow(frames, eps)


def window_from_log(Z, M=None, eps=1.0):
    """Window whose log-domain values are exactly ``Z`` (requires exp(Z) >= eps)."""
    X = np.exp(np.asarray(Z, dtype=float)) - eps
    assert np.all(X >= 0)
    return make_window(X, M, eps)


def random_pd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T / d + 0.5 * np.eye(d))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when == "call":
        for key, value in report.user_properties:
            if key == "criterion":
                _criteria.append(value)


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


_criteria = []
