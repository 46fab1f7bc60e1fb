import numpy as np
import pytest

from nestquant.grid import BitWidthSet
from nestquant.harness import CalibSet, ToyModel, run_pipeline


@pytest.fixture(scope="session")
def toy_model():
    return ToyModel.create(seed=0)


@pytest.fixture(scope="session")
def calib_set(toy_model):
    return CalibSet.generate(0, toy_model.dim)


@pytest.fixture(scope="session")
def default_bits():
    return BitWidthSet((3, 4, 8), (1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def toy_checkpoint(toy_model, calib_set, default_bits):
    ckpt, _ = run_pipeline(toy_model, calib_set, default_bits)
    return ckpt


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
