import pytest

_RESULTS: list[str] = []


@pytest.fixture
def record():
    """Append one pass/fail line per acceptance criterion to the session summary."""

    def _record(label: str, ok: bool, detail: str) -> bool:
        _RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
