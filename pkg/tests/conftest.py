import numpy as np
import pytest

from p2m.agent import AgentHyperparams, train_agent
from p2m.cooptim import DesignSpace
from p2m.desk import desk_scenario_source, desk_scenarios
from p2m.lp import build_oracle_dataset
from p2m.params import for_region
from p2m.plant import derive_pem_capacity


@pytest.fixture(scope="session")
def params():
    return for_region("skive")


@pytest.fixture(scope="session")
def design(params):
    return derive_pem_capacity(800.0, 0.25, 25.0, 400.0, params)


@pytest.fixture(scope="session")
def design_space():
    return DesignSpace.default()


@pytest.fixture(scope="session")
def short_scenarios():
    return desk_scenarios(4, seed=9, horizon=96)


@pytest.fixture(scope="session")
def oracle_ds(params, design_space):
    return build_oracle_dataset(
        10, design_space, desk_scenario_source(horizon=120), params, seed=1)


@pytest.fixture(scope="session")
def tiny_model(oracle_ds):
    hyper = AgentHyperparams(epochs=8, warmup_steps=300)
    return train_agent(oracle_ds, hyper, seed=5)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(123)
