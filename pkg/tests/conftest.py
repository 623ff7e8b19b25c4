import os

import pytest

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_configure(config):
    # keep score-table caching inside the test session unless the caller chose a directory
    if "DRANK_CACHE_DIR" not in os.environ:
        import tempfile

        os.environ["DRANK_CACHE_DIR"] = tempfile.mkdtemp(prefix="drank-test-cache-")


@pytest.fixture
def record():
    """Record one acceptance-criterion outcome for the terminal summary."""

    def _record(name: str, passed: bool, detail: str = ""):
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        tr.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
