import pytest

from faultps import nn
from faultps.data import synthetic

_ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def tiny_mlp():
    return nn.mlp(hidden=(16,))


@pytest.fixture(scope="session")
def tiny_ds():
    return synthetic(400, seed=1)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE_RESULTS.append((name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name, passed in _ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"  [{status}] {name}")
