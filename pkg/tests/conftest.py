import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES = []


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="rerun the long acceptance training runs instead of reading recorded results")


@pytest.fixture
def runslow(request):
    return request.config.getoption("--runslow")


@pytest.fixture
def report(capsys):
    """Print an acceptance line immediately and repeat it in the terminal summary."""

    def emit(line):
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
