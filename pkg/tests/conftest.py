import sys

import pytest

from stvgkit.grpo import default_env


@pytest.fixture(scope="session")
def toy_env():
    return default_env(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(mod.RESULTS.items()):
        terminalreporter.write_line(line)
