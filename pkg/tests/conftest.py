import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

# acceptance verdicts, filled by tests/test_acceptance.py
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
