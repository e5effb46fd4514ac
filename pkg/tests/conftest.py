import numpy as np
import pytest

from unlearnlab.nn_core import Batch, ModelSpec, init_params


def random_net(rng, activation=None, max_hidden=2):
    """A small random architecture with its parameters and a batch."""
    in_dim = int(rng.integers(2, 6))
    hidden = tuple(int(h) for h in rng.integers(2, 7, size=rng.integers(0, max_hidden + 1)))
    k = int(rng.integers(2, 5))
    act = activation or ("relu", "tanh")[int(rng.integers(2))]
    spec = ModelSpec(in_dim, hidden, k, act)
    theta = init_params(spec, int(rng.integers(1 << 30)))
    n = int(rng.integers(2, 9))
    batch = Batch(rng.normal(size=(n, in_dim)), rng.integers(0, k, size=n))
    return spec, theta, batch


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny():
    spec = ModelSpec(3, (4,), 3, "tanh")
    theta = init_params(spec, 7)
    r = np.random.default_rng(3)
    batch = Batch(r.normal(size=(6, 3)), r.integers(0, 3, size=6))
    return spec, theta, batch


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
