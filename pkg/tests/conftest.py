import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture()
def verdict():
    """Record one pass/fail line for an acceptance criterion; returns ``ok`` so the test can assert it."""
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
