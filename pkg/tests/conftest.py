import numpy as np
import pytest

from ltssl.numerics import RandomStream


@pytest.fixture
def rng():
    return RandomStream(1234, "tests")


@pytest.fixture
def np_rng():
    return np.random.default_rng(7)
