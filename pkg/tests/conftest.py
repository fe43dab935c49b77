import numpy as np
import pytest

from spintrack.trajectory_sim import reference_config, simulate_ensemble


@pytest.fixture(scope="session")
def reference_ensemble_small():
    """80 traces at the default operating point, shared by estimator and tuning tests."""
    cfg = reference_config(seed=7)
    return cfg, simulate_ensemble(cfg, 80)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
