import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Finite-difference sweeps and pure-Python oracles are slow per example;
# derandomize keeps CI runs reproducible.
settings.register_profile(
    "mixerca",
    deadline=None,
    max_examples=50,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("mixerca")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
