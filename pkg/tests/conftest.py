import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from allspark import tensor as T  # noqa: E402


@pytest.fixture(autouse=True)
def _reset_precision():
    T.set_precision("f32")
    yield
    T.set_precision("f32")


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
