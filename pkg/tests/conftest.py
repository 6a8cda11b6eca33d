import sys

import numpy as np
import pytest

from statetune.core import FrozenWeights, ModelDims


@pytest.fixture
def dims():
    return ModelDims(vocab_size=64, embed_dim=32, num_heads=4)


@pytest.fixture
def weights(dims):
    return FrozenWeights.generate(dims, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_bundle(rng, N, heads=None):
    """Constraint-respecting (w, k, a, v, r), optionally stacked over heads."""
    shape = (N,) if heads is None else (heads, N)
    w = rng.uniform(1e-3, 1 - 1e-3, shape)
    k = rng.standard_normal(shape)
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    a = rng.uniform(0, 1, shape)
    v = rng.standard_normal(shape)
    r = rng.standard_normal(shape)
    return w, k, a, v, r


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[num])
