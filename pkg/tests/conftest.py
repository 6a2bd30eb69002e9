import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from contagion.hawkes import HawkesParams  # noqa: E402
from contagion.jumps import Binomial, Deterministic  # noqa: E402
from contagion.market import MarketParams  # noqa: E402


@pytest.fixture
def hawkes1():
    """m=1, α=2, λ∞=1, d=1 (stationary mean 2)."""
    return HawkesParams([2.0], [1.0], [1.0], [[1.0]])


@pytest.fixture
def poisson1():
    return HawkesParams([2.0], [2.0], [2.0], [[0.0]])


@pytest.fixture
def market1():
    return MarketParams(0.03, 1, 1, [0.2], [0.0], [0.06], None, [-1.0], (Deterministic(0.1),))


@pytest.fixture
def market_mk():
    """m=2 classes of k=3 assets with nonzero orthogonal returns."""
    return MarketParams(0.02, 2, 3, [0.2, 0.3], [0.3, -0.2], [0.05, 0.08],
                        [0.01, -0.02, 0.01, 0.0, 0.03, -0.03], [-0.5, -0.8],
                        (Deterministic(0.2), Binomial(0.3, 0.1, 0.4)))


def random_market(rng, m=None, k=None, law="deterministic"):
    m = m or int(rng.integers(1, 4))
    k = k or int(rng.integers(1, 4))
    ups = rng.uniform(0.1, 0.4, m)
    lo = -1.0 / (k - 1) if k > 1 else -0.9
    rho = rng.uniform(max(lo, -0.9) * 0.9, 0.9, m)
    rbar = rng.uniform(-0.05, 0.15, m)
    perp = rng.normal(0, 0.02, (m, k))
    perp -= perp.mean(axis=1, keepdims=True)
    j = -rng.uniform(0.1, 1.0, m)
    if law == "deterministic":
        laws = tuple(Deterministic(float(rng.uniform(0.05, 0.9))) for _ in range(m))
    else:
        laws = tuple(Binomial(float(rng.uniform(0.05, 0.9)), float(rng.uniform(0.01, 0.9)), float(rng.uniform(0, 1)))
                     for _ in range(m))
    return MarketParams(0.02, m, k, ups, rho, rbar, perp.reshape(-1), j, laws)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE: dict = {}


class AcceptanceLog:
    """Collects one verdict line per acceptance criterion."""

    def record(self, key: str, ok: bool, detail: str):
        line = f"CRITERION {key}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE[key] = line
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE, key=lambda k: int(k)):
            terminalreporter.write_line(_ACCEPTANCE[key])
