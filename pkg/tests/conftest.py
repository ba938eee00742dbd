import numpy as np
import pytest

from rdextrap.dgp import DgpConfig, draw_economy, simulate_dataset
from rdextrap.equilibrium import solve_equilibrium
from rdextrap.ident import PreferenceEstimator


@pytest.fixture(scope="session")
def config():
    return DgpConfig()


@pytest.fixture(scope="session")
def economy(config):
    return draw_economy(config, replication=0)


@pytest.fixture(scope="session")
def state(economy):
    return solve_equilibrium(economy)


@pytest.fixture(scope="session")
def dataset(config):
    return simulate_dataset(config, replication=0)


@pytest.fixture(scope="session")
def turnout_dataset(config):
    return simulate_dataset(config.for_turnout(), replication=0)


@pytest.fixture(scope="session")
def fitted(dataset):
    return PreferenceEstimator().fit(dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
