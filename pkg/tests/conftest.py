import time
from pathlib import Path

import numpy as np
import pytest

from voltage_incentives.codesign import build_game_model, run_codesign
from voltage_incentives.grid import build_five_bus
from voltage_incentives.scenario import bundled_scenario, load_scenario

DATA = Path(__file__).resolve().parents[1] / "src" / "voltage_incentives" / "data"


@pytest.fixture(scope="session")
def grid():
    return build_five_bus()


@pytest.fixture(scope="session")
def base_cfg():
    return load_scenario(bundled_scenario("five_bus.scenario"))


@pytest.fixture(scope="session")
def disturbance_cfg():
    return load_scenario(bundled_scenario("five_bus_disturbance.scenario"))


@pytest.fixture(scope="session")
def base_model(base_cfg):
    return build_game_model(base_cfg)


@pytest.fixture(scope="session")
def base_point(base_cfg):
    return np.array(base_cfg.p), np.array(base_cfg.q_fixed)


class TimedTrace:
    def __init__(self, trace, seconds):
        self.trace = trace
        self.seconds = seconds


def _timed(cfg):
    t0 = time.perf_counter()
    trace = run_codesign(cfg)
    return TimedTrace(trace, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def base_run(base_cfg):
    """Full closed-loop run of the bundled scenario (a few seconds)."""
    return _timed(base_cfg)


@pytest.fixture(scope="session")
def disturbance_run(disturbance_cfg):
    """Full closed-loop run with the 40 MVar cap (about half a minute)."""
    return _timed(disturbance_cfg)


# one summary line per acceptance criterion, printed after the run
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    prev = _criteria.get(number, (title, "PASS"))[1]
    if rep.when == "call" or failed:
        _criteria[number] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
