import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def acceptance_log():
    """Record one acceptance criterion outcome for the end-of-run table."""

    def record(criterion: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((criterion, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")
