"""Shared test plumbing: the acceptance verdict summary.

Acceptance tests record one verdict line each; the terminal-summary hook
replays them after the run so every criterion's PASS/FAIL/SKIP line is
visible even though pytest captures per-test output.
"""

ACCEPTANCE_VERDICTS: list[str] = []


def record_verdict(line: str):
    ACCEPTANCE_VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_VERDICTS:
        terminalreporter.write_line(line)
