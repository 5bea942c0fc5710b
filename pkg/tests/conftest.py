import pytest

_criteria: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of a numbered acceptance criterion for the summary."""
    def record(number: int, passed: bool, detail: str = "") -> bool:
        _criteria[number] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        passed, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
