import numpy as np
import pytest

from admloc.skeleton import build_mpii_skeleton


@pytest.fixture(scope="session")
def mpii():
    return build_mpii_skeleton()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(0))
