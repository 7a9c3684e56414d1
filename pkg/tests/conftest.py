import os

import numpy as np
import pytest

from mcafem.mesh import read_mesh

DATA = os.path.join(os.path.dirname(__file__), "data")


def data_path(name):
    return os.path.join(DATA, name)


@pytest.fixture
def square():
    return read_mesh(data_path("unit_square.mesh"))


@pytest.fixture
def lshape():
    return read_mesh(data_path("lshape_coarse.mesh"))


class Laplace:
    """A = I, phi = 0, duck-typed like a problem definition."""

    name = "laplace"
    constant_coefficient = True
    reference = None

    def eval_coefficient(self, x):
        return np.broadcast_to(np.eye(2), (len(x), 2, 2))

    def eval_potential(self, x):
        return np.zeros(len(x))

    def eval_coefficient_div(self, x, h=None):
        return np.zeros((len(x), 2))


@pytest.fixture
def laplace():
    return Laplace()
