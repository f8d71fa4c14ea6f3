from __future__ import annotations

# Acceptance tests record one verdict line per criterion here; the lines are
# printed together at the end of the session.
VERDICTS: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
