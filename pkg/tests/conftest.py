import pytest

# Criterion verdicts collected by test_acceptance.py, echoed once at the end.
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)


@pytest.fixture
def single_thread(monkeypatch):
    monkeypatch.setenv("DDSAM2_THREADS", "1")
