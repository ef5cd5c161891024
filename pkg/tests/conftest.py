import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict line; returns the pass flag so the test can assert on it."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
        CRITERIA[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
