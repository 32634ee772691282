"""Shared test hooks: collect one verdict line per acceptance criterion."""

import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """Record ``(number, passed, detail)`` for the end-of-run criteria summary."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} ({detail})"
        CRITERIA[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
