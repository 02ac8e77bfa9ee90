import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from expomamba import model

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


ALL_ON = dataclasses.replace(model.TINY, **{k: True for k in model.ABLATION_SWITCHES})
ALL_OFF = dataclasses.replace(model.TINY, **{k: False for k in model.ABLATION_SWITCHES})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[ALL_ON, ALL_OFF], ids=["all-on", "all-off"])
def ablation_cfg(request):
    """Model-level tests run once with every switch on and once with all off."""
    return request.param


_ACCEPTANCE: dict[str, bool] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if not item.nodeid.startswith("tests/test_acceptance.py") or report.when != "call" and report.passed:
        return
    label = (item.function.__doc__ or item.name).strip().splitlines()[0]
    _ACCEPTANCE[label] = _ACCEPTANCE.get(label, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")
