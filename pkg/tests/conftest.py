import os

import pytest
from hypothesis import HealthCheck, settings

from hnlpu import golden

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def toy_cfg():
    return golden.ModelConfig.toy()


@pytest.fixture(scope="session")
def toy_model(toy_cfg):
    return golden.random_weights(toy_cfg, seed=0)
