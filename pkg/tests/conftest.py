import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion_log():
    """Record one PASS/FAIL line that is echoed in the terminal summary."""
    return _LINES.append


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
