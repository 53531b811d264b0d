import numpy as np
import pytest

from trumpetflow.model import Architecture, CTrumpetModel


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run training-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return Architecture(latent_dim=2, data_dim=4, cond_dim=2, g_blocks=2, h_blocks=2,
                        hidden_width=8, cond_width=4, seed=3)


@pytest.fixture
def tiny_model(tiny_arch):
    return CTrumpetModel(tiny_arch)
