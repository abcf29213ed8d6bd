"""Shared fixtures: the default gate, its blockade model and an optimized pulse."""

import numpy as np
import pytest

from rydcz.atom import GateParams, build_blockade_model
from rydcz.grape import OptimizerSettings, optimize

# criterion lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def params():
    return GateParams.defaults()


@pytest.fixture(scope="session")
def model(params):
    return build_blockade_model(params)


@pytest.fixture(scope="session")
def optimized(params, model):
    """A converged CZ pulse from a short optimization (two restarts)."""
    return optimize(params, 100, seed=0, settings=OptimizerSettings(restarts=2), model=model)


@pytest.fixture(scope="session")
def pulse(optimized):
    return optimized.pulse


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_report():
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
