import numpy as np
import pytest
from hypothesis import settings

from widin.synthworld import WorldSpec, generate_world

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def world():
    return generate_world(WorldSpec(seed=1))


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldSpec(num_classes=4, d=16, d_v=20, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
