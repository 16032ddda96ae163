import numpy as np
import pytest

from helpers import random_bnn_data, toy_data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy():
    return toy_data()


@pytest.fixture
def bnn10(rng):
    return random_bnn_data(rng, n=10)
