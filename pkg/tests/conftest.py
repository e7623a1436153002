import numpy as np
import pytest

from sslfgvc import tensor as T


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
