import pytest

from popstab.core import validate_and_derive

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def params12():
    return validate_and_derive({"n_target": 2**12, "gamma": 1, "adversary_budget": 0, "alpha": "1/10"})


@pytest.fixture(scope="session")
def params16():
    return validate_and_derive({"n_target": 2**16, "gamma": 1, "adversary_budget": 0, "alpha": "1/10"})


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
