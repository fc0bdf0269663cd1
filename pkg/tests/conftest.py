import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from depcae.benchmark import make_benchmark  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A rendered ``corridor-small`` benchmark shared by the whole session."""
    root = tmp_path_factory.mktemp("corridor_small")
    make_benchmark("corridor-small", 3, root)
    return root


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
