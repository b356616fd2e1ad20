import numpy as np
import pytest
from hypothesis import settings

from histoformer.autograd import precision

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def distinct(rng, *shape):
    """Shuffled, well-separated values (no ties anywhere)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) - n / 2) / n
