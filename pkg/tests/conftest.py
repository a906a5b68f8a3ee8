import pytest
from hypothesis import HealthCheck, settings

from chaoswave.model import CovarianceModel

settings.register_profile("repo", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def riesz():
    return CovarianceModel()


@pytest.fixture(scope="session")
def white():
    return CovarianceModel(spatial_mode="white")
