"""Shared pytest wiring for the acceptance gate.

Acceptance tests report through the ``criterion_report`` fixture, which
prints one ``[criterion NN] name: PASS/FAIL (detail)`` line per criterion
and repeats all collected lines in a terminal summary block so the whole
gate can be read off one screen.
"""

import pytest

_criterion_lines = []


@pytest.fixture(scope="session")
def criterion_report():
    def report(num, name, ok, detail):
        status = "PASS" if ok else "FAIL"
        line = f"[criterion {num:02d}] {name}: {status} ({detail})"
        print(line)
        _criterion_lines.append(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
