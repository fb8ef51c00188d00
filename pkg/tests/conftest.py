import pytest

from ehrelay.exact import build_kernel
from ehrelay.instances import tiny_instance


@pytest.fixture(scope="session")
def tiny():
    return tiny_instance()


@pytest.fixture(scope="session")
def tiny_kernel(tiny):
    params, channel = tiny
    return build_kernel(params, channel)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL verdict for the run summary, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
