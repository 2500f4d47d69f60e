import numpy as np
import pytest

from ooalign import fixtures


@pytest.fixture
def cube():
    return fixtures.unit_cube()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)
