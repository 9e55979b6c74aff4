import pytest

from trajcast.model import init_params

from helpers import tiny_config


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=3)
