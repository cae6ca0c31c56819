import pytest

CRITERIA = {}


@pytest.fixture
def record():
    """Store a one-line verdict for an acceptance criterion."""

    def _record(number, ok, detail):
        CRITERIA[number] = (ok, detail)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
