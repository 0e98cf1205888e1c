import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it, and fail the test on FAIL."""

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
        _LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
