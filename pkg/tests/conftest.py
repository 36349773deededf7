"""Shared pytest wiring: acceptance tests record one PASS/FAIL line per
criterion, echoed in the terminal summary so they survive output capture."""

_criterion_lines = []


def record_criterion(number: int, line: str) -> None:
    _criterion_lines.append((number, line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
