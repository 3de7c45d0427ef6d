import sys

import pytest

from lstore import Database
from worked_example import Example


@pytest.fixture
def example():
    return Example().run_updates()


@pytest.fixture
def db():
    d = Database()
    yield d
    d.close()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
