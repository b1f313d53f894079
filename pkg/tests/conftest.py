import numpy as np
import pytest

from slip import models, ring

# Filled by test_acceptance.py; printed after the run so every criterion gets
# one visible line even when output capture is on.
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, text = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {text}")


@pytest.fixture
def big_ring():
    return ring.RingParams()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_mlp(rng, max_layers=5, max_dim=64, seed=None):
    n_layers = int(rng.integers(1, max_layers + 1))
    dims = [int(d) for d in rng.integers(2, max_dim + 1, size=n_layers + 1)]
    acts = [str(rng.choice(["relu", "identity"])) for _ in range(n_layers)]
    return models.toy_mlp(tuple(dims), acts, seed=int(rng.integers(1 << 30)), bias=bool(rng.integers(2)))
