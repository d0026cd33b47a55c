import numpy as np
import pytest

from flowalign.envs import GaussMixEnv
from flowalign.experiments import PretrainConfig, pretrain


@pytest.fixture(scope="session")
def env():
    return GaussMixEnv()


@pytest.fixture(scope="session")
def pretrained(env):
    """Default-env flow model, pretrained once per session (a few seconds)."""
    model, losses = pretrain(env, PretrainConfig(), seed=0)
    return model, losses


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
