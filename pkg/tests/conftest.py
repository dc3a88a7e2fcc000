import pytest

from gridsplit.engine import bundled
from gridsplit.netcore import load_case

CASE9_SUBSYSTEM_CUTS = [(1, 4)]
CASE9_SUBDOMAIN_CUTS = [(6, 7), (9, 4)]


@pytest.fixture(scope="session")
def case9_path():
    return bundled("case9")


@pytest.fixture(scope="session")
def case9(case9_path):
    return load_case(case9_path)


TWO_BUS = """
base_mva = 100
BUS
1 3 0 0 0 0 230
2 1 50 10 0 0 230
BRANCH
1 2 0.01 0.1 0 1
GEN
1 machine m1
[machine m1]
H = 3.7
"""


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
