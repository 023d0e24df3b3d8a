"""Collects the acceptance verdicts and prints them after the test run."""

import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records and prints one criterion line, then asserts ``ok``."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(line)
