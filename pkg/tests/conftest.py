"""Shared test config plus the acceptance report hook.

Acceptance tests call record() so a one-line verdict per criterion is
printed at the end of the run even under plain `pytest`.
"""

import pytest

_report = []


def record(name, ok, detail=""):
    _report.append((name, bool(ok), detail))


@pytest.fixture
def acceptance():
    """Record a named acceptance check, then assert it."""

    def check(name, ok, detail=""):
        record(name, ok, detail)
        assert ok, f"{name}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _report:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, ok, detail in _report:
        verdict = "PASS" if ok else "FAIL"
        line = f"[{verdict}] {name}"
        if detail:
            line += f": {detail}"
        tr.write_line(line)
