import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ridepool.city import grid_zone_map
from ridepool.model import Request

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def grid5():
    return grid_zone_map(5, 5)


@pytest.fixture
def grid3():
    return grid_zone_map(3, 3)


def req(rid, o, d, driver=False, arrival=1, wait=5, provisional=False):
    return Request(rid, o, d, driver, wait, arrival, provisional)


@pytest.fixture
def make_req():
    return req


def rng(seed=0):
    return np.random.default_rng(seed)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
