import numpy as np
import pytest

from brinkman_ocp import fespace, mesh


@pytest.fixture
def rule():
    return fespace.make_quadrature(10)


@pytest.fixture
def square4():
    return mesh.build_unit_square(4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
