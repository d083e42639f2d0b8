import pytest

from rnac.cli import bundled_model_path
from rnac.rmdp import (
    LogLinearPolicy,
    NominalModel,
    build_gridworld,
    random_features,
    tabular_features,
    with_restart,
)


@pytest.fixture(scope="session")
def garnet():
    return NominalModel.load(bundled_model_path())


@pytest.fixture(scope="session")
def grid():
    return with_restart(build_gridworld(3, 3, 0.1, 0.9))


@pytest.fixture(scope="session")
def tab(garnet):
    return tabular_features(garnet.n_states, garnet.n_actions)


@pytest.fixture(scope="session")
def feats(garnet):
    return random_features(0, garnet.n_states, garnet.n_actions, 3, 4)


@pytest.fixture
def uniform_policy(garnet, tab):
    return LogLinearPolicy.uniform(tab, garnet.n_actions)
