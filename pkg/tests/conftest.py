import numpy as np
import pytest

from bsvielab import BasisConfig, make_grid, simulate_brownian


@pytest.fixture(scope="session")
def grid25():
    return make_grid(1.0, 25)


@pytest.fixture(scope="session")
def ens25(grid25):
    # Shared medium ensemble; everything downstream is a pure read.
    return simulate_brownian(grid25, 20000, 20240601)


@pytest.fixture(scope="session")
def grid_small():
    return make_grid(1.0, 8)


@pytest.fixture(scope="session")
def ens_small(grid_small):
    return simulate_brownian(grid_small, 4000, 99)


@pytest.fixture(scope="session")
def basis():
    return BasisConfig(degree=3)


def rmse(a, b=0.0):
    return float(np.sqrt(np.mean((np.asarray(a) - b) ** 2)))


@pytest.fixture(scope="session")
def rmse_fn():
    return rmse
