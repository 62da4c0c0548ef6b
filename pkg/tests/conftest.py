import sys

import numpy as np
import pytest

from spindiff.config import species_registry


@pytest.fixture(scope="session")
def registry():
    return species_registry()


@pytest.fixture(scope="session")
def er0(registry):
    return registry["Er_I0"]


@pytest.fixture(scope="session")
def er167(registry):
    return registry["Er167"]


@pytest.fixture(scope="session")
def yb0(registry):
    return registry["Yb_I0"]


OMEGA_R = 2 * np.pi * 4.37e9


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
