import pytest

_LINES = []


@pytest.fixture(scope="session")
def criterion_report():
    def record(line):
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
