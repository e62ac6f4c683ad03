"""
Shared pytest fixtures
"""
import matplotlib

matplotlib.use('Agg')

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from procedure_engine import ProcedureConfig  # noqa: E402
from testing_state import ProcedureState  # noqa: E402


@pytest.fixture
def config():
    """alpha = 0.05, pi = 0.1, lambda = 0.5"""
    return ProcedureConfig(level=0.05, spend_fraction=0.1, lmbda=0.5)


@pytest.fixture
def empty_state():
    return ProcedureState(level=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def mixed_stream(rng):
    """200 p-values, roughly a fifth of them strong signals"""
    p = rng.random(200)
    signal = rng.random(200) < 0.2
    p[signal] = p[signal] * 1e-3
    return p
