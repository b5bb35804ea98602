import numpy as np
import pytest

from vhempc.harness import offline_ingredients
from vhempc.model import cstr_scenario


@pytest.fixture(scope="session")
def cstr():
    return cstr_scenario()


@pytest.fixture(scope="session")
def cstr_ing():
    return offline_ingredients("cstr")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one line per acceptance criterion; printed in the terminal summary."""
    lines = getattr(request.config, "_acceptance_lines", None)
    if lines is None:
        lines = request.config._acceptance_lines = []
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
