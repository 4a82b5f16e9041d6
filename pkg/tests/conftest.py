import sys

import numpy as np
import pytest

from noise2norm.tensor import clear_graph, precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield
    clear_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _fresh_graph():
    clear_graph()
    yield
    clear_graph()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
