import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from densteer import registry
from densteer.feedlin import build_linearization

settings.register_profile(
    "densteer", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("densteer")


@pytest.fixture(scope="session")
def paper():
    e = registry.get("paper_example")
    sys = e.system()
    fl = build_linearization(sys, e.outputs(), e.x0, e.analytic_inverse())
    return e, sys, fl


@pytest.fixture(scope="session")
def paper_newton():
    """Same system but with the inverse map found by Newton iteration."""
    e = registry.get("paper_example")
    sys = e.system()
    return build_linearization(sys, e.outputs(), e.x0)


@pytest.fixture(scope="session")
def dint():
    e = registry.get("double_integrator")
    sys = e.system()
    return e, sys, build_linearization(sys, e.outputs(), e.x0, e.analytic_inverse())


@pytest.fixture(scope="session")
def toy2d():
    e = registry.get("toy2d_nonlinear")
    sys = e.system()
    return e, sys, build_linearization(sys, e.outputs(), e.x0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if getattr(getattr(item, "obj", None), "is_hypothesis_test", False):
            item.add_marker(pytest.mark.property)


def pytest_sessionstart(session):
    session.config._densteer_started = time.perf_counter()


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def report(number, ok, detail, seconds=None):
        took = "" if seconds is None else f" [{seconds:.2f} s]"
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}{took}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
    total = time.perf_counter() - config._densteer_started
    terminalreporter.write_line(f"total session runtime {total:.1f} s (budget 300 s)")
