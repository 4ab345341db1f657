"""Shared pytest hooks: the acceptance suite reports one verdict line per criterion."""
import pytest

ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def verdicts():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
