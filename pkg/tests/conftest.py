import numpy as np
import pytest

from iiccff.fixtures import fixture_path
from iiccff.meta_normal import read_studies


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def skulls():
    return read_studies(fixture_path("skulls"))


WHALES = {"p1": (9810.0, 3439.0, 21457.0), "p2": (11319.0, 6651.0, 21214.0)}


@pytest.fixture(scope="session")
def whales():
    return WHALES
