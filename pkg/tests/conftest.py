import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from maebench import kernels

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """Each available kernel implementation (``python`` and, when built, ``cython``)."""
    return kernels.BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
