"""Shared pytest wiring: the acceptance-criteria scoreboard.

Acceptance tests register one verdict line each; the lines are printed in
criterion order as a terminal section after the run, where pytest's output
capture cannot swallow them.
"""

_VERDICTS: dict[int, str] = {}


def record_verdict(num: int, line: str) -> None:
    _VERDICTS[num] = line


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_VERDICTS):
            terminalreporter.line(_VERDICTS[num])
