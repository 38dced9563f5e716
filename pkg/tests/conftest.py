import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}
_EXPECTED = range(1, 10)


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the summary prints every verdict."""

    def record(number: int, ok: bool, detail: str):
        _RESULTS[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in _EXPECTED:
        ok, detail = _RESULTS.get(n, (False, "did not run to completion"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
