import numpy as np
import pytest

from lossytp.harness import desk_model_spec
from lossytp.model import init_model
from lossytp.sap import collect_calibration, synthetic_prompts, train


@pytest.fixture(scope="session")
def desk_spec():
    return desk_model_spec(seed=3)


@pytest.fixture(scope="session")
def desk_store(desk_spec):
    return init_model(desk_spec)


@pytest.fixture(scope="session")
def desk_calibration(desk_spec, desk_store):
    prompts = synthetic_prompts(desk_spec, 40, 24, seed=11)
    return collect_calibration(desk_store, prompts)


@pytest.fixture(scope="session")
def desk_predictors(desk_calibration):
    pset, val_losses = train(desk_calibration, seed=0)
    return pset, val_losses


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
