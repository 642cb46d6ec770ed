from __future__ import annotations

import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record a one-line outcome for an acceptance criterion and print it."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
