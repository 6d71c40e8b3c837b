import pytest

# (criterion number, passed, detail) lines collected by test_acceptance
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        passed, detail = ACCEPTANCE_LINES[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(n, passed, detail):
        ACCEPTANCE_LINES[n] = (bool(passed), detail)
        print(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record
