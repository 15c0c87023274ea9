import numpy as np
import pytest

from beliefkit.envs import BUILTIN_ENVS, make_env, make_repeat_previous, make_tiger


@pytest.fixture(scope="session")
def tiger():
    return make_tiger()


@pytest.fixture(scope="session")
def rp214():
    return make_repeat_previous(2, 1, 4)


@pytest.fixture(scope="session")
def builtin():
    return {name: make_env(name) for name in BUILTIN_ENVS}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
