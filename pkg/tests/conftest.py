import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metaocc import numerics

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def finite_checks():
    numerics.set_finite_checks(True)
    yield
    numerics.set_finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
