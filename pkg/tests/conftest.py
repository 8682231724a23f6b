import time

import pytest

SUITE_BUDGET_S = 300.0

_lines = []
_started = [0.0]


def pytest_sessionstart(session):
    _started[0] = time.perf_counter()


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, passed, detail)."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _lines.append((number, line))
        print(line)
        return passed

    return record


def _runtime_line():
    elapsed = time.perf_counter() - _started[0]
    ok = elapsed < SUITE_BUDGET_S
    return ok, f"criterion 10: {'PASS' if ok else 'FAIL'}  full suite {elapsed:.1f} s (budget {SUITE_BUDGET_S:.0f} s)"


def pytest_sessionfinish(session, exitstatus):
    ok, _ = _runtime_line()
    if not ok and exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not _lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_lines):
        terminalreporter.write_line(line)
    terminalreporter.write_line(_runtime_line()[1])
