import numpy as np
import pytest

from kinhilbert import macro as M
from kinhilbert.grid import FluidState
from kinhilbert.presets import operator


@pytest.fixture(scope="session")
def op8():
    return operator(8)


@pytest.fixture(scope="session")
def basis8(op8):
    return M.make_basis(op8.state, op8.grid)


@pytest.fixture(scope="session")
def pinv8(op8, basis8):
    return M.factor_pseudo_inverse(op8, basis8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def moving_state():
    return FluidState(1.2, (0.1, -0.05, 0.0), 0.9)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full-resolution acceptance checks (slow)")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for name in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[name])
