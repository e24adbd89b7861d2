import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lyadeq import tensor as T

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def fresh_graph():
    T.get_graph().clear()
    yield
    T.get_graph().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
