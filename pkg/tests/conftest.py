import numpy as np
import pytest

from spamtrees.cli import random_theta  # noqa: F401  (shared with tests)
from spamtrees.covariance import ThetaParams
from spamtrees.treegraph import build_tree


def random_config(seed, n_max=300):
    """Random locations, variables and a tree at one of the tested depths."""
    rng = np.random.default_rng(seed)
    q = int(rng.integers(1, 4))
    n = int(rng.integers(30, n_max + 1))
    coords = rng.uniform(size=(n, 2))
    var = rng.integers(0, q, n)
    observed = rng.uniform(size=n) < 0.7
    observed[:5] = True
    M = int(rng.integers(2, 4))
    delta = [1, min(2, M), M][seed % 3]
    dag = build_tree(coords, var, observed, M=M, delta=delta, n_s=int(rng.integers(3, 9)),
                     seed=seed, q=q)
    return dag, random_theta(q, rng), rng


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def theta2():
    return ThetaParams([1.0, 1.5], [0.5, 1.0], [2.0, 5.0], [[0, 1], [1, 0]], 1.0, 1.0, 3.0)


@pytest.fixture
def small_dags(rng, theta2):
    coords = rng.uniform(size=(90, 2))
    var = rng.integers(0, 2, 90)
    return {d: build_tree(coords, var, M=3, delta=d, n_s=5, seed=1) for d in (1, 2, 3)}


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
