import numpy as np
import pytest

from facefit.scene import default_setup, generate_scene


@pytest.fixture(scope="session")
def setup0():
    return default_setup(0)


@pytest.fixture(scope="session")
def pca_setup0():
    return default_setup(0, texture="pca")


@pytest.fixture(scope="session")
def scene0(setup0):
    return generate_scene(0, 1, setup0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
_acceptance_reports = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.failed):
        _acceptance_reports.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_reports:
        return
    terminalreporter.section("acceptance criteria")
    for r in _acceptance_reports:
        detail = "; ".join(str(v) for k, v in r.user_properties if k == "detail")
        name = r.nodeid.split("::")[-1]
        terminalreporter.write_line(f"{'PASS' if r.passed else 'FAIL'}  {name}  {detail}")
