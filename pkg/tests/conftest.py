import numpy as np
import pytest
from hypothesis import settings

from gsq.fixtures import load_fixture

settings.register_profile("gsq", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("gsq")


@pytest.fixture(scope="session")
def fixture_data():
    return load_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
