import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("glsgn", deadline=None, max_examples=25)
settings.load_profile("glsgn")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
