import numpy as np
import pytest

from follmer_kit.pathgen import PartitionSequence, gen_fbm, gen_wiener


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def wiener14():
    return gen_wiener(14, 5)


@pytest.fixture(scope="session")
def fbm14():
    return gen_fbm(0.25, 14, 7)


@pytest.fixture(scope="session")
def dyadic8_14():
    return PartitionSequence("dyadic", range(8, 15))
