import numpy as np
import pytest

from mvem.model import LINEAR_EXAMPLE_CONSTANTS, LinearMeanFieldModel


@pytest.fixture
def linear():
    return LinearMeanFieldModel(1.2, 0.4, 1.0, constants=LINEAR_EXAMPLE_CONSTANTS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
