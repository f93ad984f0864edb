import numpy as np
import pytest

from brwre import binary_model, categorical_model, gaussian_model
from brwre.env import EnvironmentSpec


@pytest.fixture
def binary():
    return binary_model()


@pytest.fixture
def gauss():
    return gaussian_model(2, [0.0], 1.0)


@pytest.fixture
def gauss2():
    """Two states with variances 1 and 2."""
    return gaussian_model(2, [0.0], [1.0, 2.0])


@pytest.fixture
def sym_markov():
    return EnvironmentSpec.markov([[0.8, 0.2], [0.2, 0.8]])


@pytest.fixture
def four_step():
    return categorical_model([[1.0], [-1.0], [5.0], [-5.0]], [0.25] * 4)


@pytest.fixture
def det():
    return EnvironmentSpec.deterministic()


def pytest_configure(config):
    np.seterr(over="warn")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
