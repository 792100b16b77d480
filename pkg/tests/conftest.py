import numpy as np
import pytest

from gossipsgd.core import Hyperparams, NodeState, RngStream
from gossipsgd.objectives import LogisticObjective, NoiseModel, QuadraticObjective

REF_SPECTRUM = (1.0, 2.0, 5.0, 10.0)


def plain(p=1, alpha=0.1, **kw):
    """Hyperparameters for hand-checkable steps: no momentum, no decay, no annealing."""
    kw.setdefault("mu", 0.0)
    kw.setdefault("weight_decay", 0.0)
    kw.setdefault("anneal_at", ())
    return Hyperparams(alpha0=alpha, p=p, **kw)


def scalar_node(theta, node_id=0, t=0, rng=None):
    return NodeState(node_id, np.array([float(theta)]), np.zeros(1), t, rng)


def nodes_from(values, seed=0, run_id="t"):
    return [
        NodeState.fresh(i, np.atleast_1d(np.asarray(v, dtype=float)), RngStream(seed, run_id, i, "noise"))
        for i, v in enumerate(values)
    ]


@pytest.fixture(scope="session")
def unit_quad():
    return QuadraticObjective(np.array([1.0]))


@pytest.fixture(scope="session")
def ref_quad():
    return QuadraticObjective(np.array(REF_SPECTRUM))


@pytest.fixture(scope="session")
def no_noise():
    return NoiseModel(0.0)


@pytest.fixture(scope="session")
def logistic():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(60, 3))
    y = (X @ np.array([1.0, -2.0, 0.5]) + 0.3 * rng.normal(size=60) > 0).astype(float)
    return LogisticObjective(X, y, l2=0.05)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
