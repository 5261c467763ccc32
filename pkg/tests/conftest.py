import os

import numpy as np
import pytest


def random_digraph(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    a = (rng.random((n, n)) < p).astype(np.int64)
    np.fill_diagonal(a, 0)
    return a


def sym(a: np.ndarray) -> np.ndarray:
    u = ((a + a.T) > 0).astype(np.int64)
    np.fill_diagonal(u, 0)
    return u


@pytest.fixture
def run_cache():
    """Optional on-disk cache of simulation runs (keyed by config, seed and code
    hash); set FEEDLOOP_RUN_CACHE to a directory to reuse runs across sessions."""
    return os.environ.get("FEEDLOOP_RUN_CACHE") or None


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
