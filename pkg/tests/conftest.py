import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evcharge.domain import ChargingRequest, StationSpec, TrainConfig
from evcharge.scenario import Scenario

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def station(i, x, y=0.0, capacity=1, power=60.0, schedule=((0, 1440, 1.5),)):
    return StationSpec(id=i, location=(x, y), capacity=capacity, power=power,
                       price_schedule=tuple(schedule))


def request(i, minute, x, y=0.0, energy=30.0, gt=0):
    return ChargingRequest(id=i, arrival_minute=minute, location=(x, y), energy=energy,
                           ground_truth_station=gt)


def scenario(stations, *days):
    return Scenario(tuple(stations), tuple(tuple(d) for d in days))


class Fixed:
    """Policy that always recommends one station."""

    def __init__(self, sid):
        self.sid = sid

    def recommend(self, req, sim):
        return self.sid


class Script:
    """Policy recommending from a {request_id: station} map."""

    def __init__(self, mapping):
        self.mapping = mapping

    def recommend(self, req, sim):
        return self.mapping[req.id]


@pytest.fixture
def cfg():
    return TrainConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
