import sys
from pathlib import Path

import numpy as np
import pytest

from igcam import fixtures

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"
RANDOM_SEEDS = (0, 1, 2, 3, 4)
DEAD_RELU_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def quadrant():
    return fixtures.quadrant_fixture(0)


@pytest.fixture(scope="session")
def dead_relu():
    return fixtures.dead_relu_fixture(0)


@pytest.fixture(scope="session")
def random_nets():
    return [fixtures.random_fixture(s, count=3) for s in RANDOM_SEEDS]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
