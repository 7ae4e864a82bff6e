import numpy as np
import pytest

from fedtrip.data import make_synthetic_blobs
from fedtrip.nn import Dataset


def central_diff(fn, x: np.ndarray, step: float) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    out = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (fn(xp) - fn(xm)) / (2 * step)
    return out


def rel_err(a, b, floor):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture(scope="session")
def blobs():
    """Small 10-class task: (train, test)."""
    return (make_synthetic_blobs(10, 20, 300, 0.8, seed=1),
            make_synthetic_blobs(10, 20, 50, 0.8, seed=2))


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(5)
    return Dataset(rng.normal(size=(40, 3)), rng.integers(0, 3, size=40), 3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
