import pytest

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record ``(number, ok, detail)`` for the acceptance summary printed at session end."""

    def record(number, ok, detail):
        _RESULTS[number] = (bool(ok), detail)
        print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
