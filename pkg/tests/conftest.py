import numpy as np
import pytest

from lkformer.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
