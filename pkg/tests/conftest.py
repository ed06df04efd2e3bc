import numpy as np
import pytest

from certunlearn.model import Dataset
from certunlearn.problems import QuadraticLoss


@pytest.fixture
def quad():
    return QuadraticLoss(1)


def scalars(*zs):
    return Dataset(np.array(zs, dtype=float).reshape(-1, 1), np.zeros(len(zs)))


# Lines recorded by the acceptance suite, echoed at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
