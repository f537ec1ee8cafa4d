"""Shared fixtures and the acceptance summary printed at the end of a session."""

ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} -- {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
