import pytest

# (number, passed, detail) appended by the acceptance tests
ACCEPTANCE_RESULTS = []


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_RESULTS.append((number, bool(passed), detail))
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
