import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from omsn.data import SynthConfig, synth_dataset


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    # bitwise reproducibility assertions assume a fixed BLAS thread count
    with threadpool_limits(1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_small():
    return synth_dataset(12, SynthConfig(size=48, seed=7))
