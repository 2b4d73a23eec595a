import numpy as np
import pytest

from scenario_config import ScenarioConfig
from tests.helpers import small_scenario


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow statistical tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def scenario() -> ScenarioConfig:
    return small_scenario()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
