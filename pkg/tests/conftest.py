import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

#: One summary line per acceptance criterion, echoed at the end of the session.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
