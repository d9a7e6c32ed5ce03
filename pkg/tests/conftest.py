import pytest

ACCEPTANCE = {}


@pytest.fixture
def record():
    """record(number, ok, detail) stores one acceptance line for the summary."""
    def _record(number: int, ok: bool, detail: str) -> bool:
        prev = ACCEPTANCE.get(number)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}"
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
