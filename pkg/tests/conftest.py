import numpy as np
import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[number] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def record(request):
    """Attach a one-line summary of measured values to the acceptance report."""
    def _record(text):
        request.node.criterion_detail = text
    return _record


@pytest.fixture(scope="session")
def sim_small():
    from ivdrf.sim.dgp import DgpSpec, simulate_dgp
    return simulate_dgp(DgpSpec(1500, 3))


@pytest.fixture(scope="session")
def sim_5000():
    from ivdrf.sim.dgp import DgpSpec, simulate_dgp
    return simulate_dgp(DgpSpec(5000, 42))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
