import numpy as np
import pytest

from deskbert import tensor as tz


@pytest.fixture
def f64():
    """Run the test in float64 oracle mode."""
    with tz.use_dtype(np.float64):
        yield


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64DXSM(seed))
