# tests/conftest.py
import numpy as np
import pytest

from mixlab import catalog
from mixlab.dynamics import RdsSystem
from mixlab.measures import Box


@pytest.fixture(scope="session")
def linear_1d():
    return catalog.kicked_linear_1d()


@pytest.fixture(scope="session")
def cubic_1d():
    return catalog.kicked_cubic_1d()


@pytest.fixture(scope="session")
def pure_noise():
    return catalog.pure_noise()


@pytest.fixture(scope="session")
def ar1():
    return catalog.ar1_truncgauss(a=0.5, s=0.3)


@pytest.fixture(scope="session")
def iid():
    return catalog.iid_uniform()


@pytest.fixture(scope="session")
def drift():
    return catalog.drift_away()


def affine_system(a: float, half_x: float, half_k: float = 1.0, name: str = "affine") -> RdsSystem:
    """S(u, eta) = a u + eta on X = [-half_x, half_x], K = [-half_k, half_k]."""
    def shape(u, eta):
        return np.broadcast_shapes(np.shape(u)[:-1], np.shape(eta)[:-1])

    return RdsSystem(
        name=name,
        dim_state=1,
        dim_noise=1,
        map=lambda u, eta: a * u + eta,
        d_state=lambda u, eta: np.full(shape(u, eta) + (1, 1), a),
        d_noise=lambda u, eta: np.ones(shape(u, eta) + (1, 1)),
        invariant_set=Box.cube(half_x, 1),
        noise_support=Box.cube(half_k, 1),
    )


@pytest.fixture
def make_affine():
    return affine_system
