import numpy as np
import pytest

from support import GOODS_SIGMAS, SERVICE_SIGMAS, make_tech


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260819)


@pytest.fixture
def goods_tech():
    return make_tech(GOODS_SIGMAS)


@pytest.fixture
def service_tech():
    return make_tech(SERVICE_SIGMAS)
