"""Shared pytest plumbing.

The acceptance tests register one line per criterion; this hook replays
them in a dedicated section after the run so the verdicts are visible
without -s.
"""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
