import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one status line outside capture and keep it for the terminal summary."""
    def emit(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
