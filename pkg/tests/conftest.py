import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


# acceptance criteria: one PASS/FAIL line each in the terminal summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[marker.args[0]] = ("PASS" if rep.passed else "FAIL", item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {name}  {detail}".rstrip())
