import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# Filled by test_acceptance.py: one (number, passed, line) entry per criterion.
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
