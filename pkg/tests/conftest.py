import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from p2pgrid.grid import RadialNetwork, ieee33  # noqa: E402

# acceptance outcomes, filled in by test_acceptance.py
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[key])


@pytest.fixture(scope="session")
def net33():
    return ieee33()


def two_node(r=0.1, x=0.1, p_load=0.0, q_load=0.0, **kw):
    return RadialNetwork(p_load=[0.0, p_load], q_load=[0.0, q_load], v_min=[0.9, 0.9],
                         v_max=[1.1, 1.1], from_node=[0], to_node=[1], r=[r], x=[x],
                         s_max=[np.inf], s_min=[0.0], **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
