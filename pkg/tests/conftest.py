import datetime as dt
import sys

import pytest

from smartstore.codec import Timestamp
from smartstore.roles import get_or_create_role
from smartstore.schema import (
    DATE_AND_TIME,
    INTEGER,
    ROLE_ENTITY,
    SUPER_USER,
    TEXT,
    EntitySchema,
    RefTo,
    SchemaRegistry,
    SetOf,
)
from smartstore.store import MemoryStore

START = Timestamp.from_datetime(dt.datetime(2021, 1, 1, tzinfo=dt.timezone.utc))


class TickClock:
    """Deterministic clock: every reading is one second after the previous one."""

    def __init__(self, start: Timestamp = START, step_us: int = 1_000_000):
        self.next = start.micros
        self.step = step_us
        self.readings: list[Timestamp] = []

    def __call__(self) -> Timestamp:
        ts = Timestamp(self.next)
        self.next += self.step
        self.readings.append(ts)
        return ts


def hospital_registry() -> SchemaRegistry:
    registry = SchemaRegistry()
    registry.register(EntitySchema("Individual", {"names": TEXT, "surnames": TEXT}, parent=ROLE_ENTITY))
    registry.register(
        EntitySchema("Patient", {"birthDate": DATE_AND_TIME, "address": TEXT}, parent="Individual")
    )
    registry.register(EntitySchema("HospitalService", {"label": TEXT}, parent=ROLE_ENTITY))
    registry.register(EntitySchema("Counter", {"value": INTEGER}))
    registry.register(EntitySchema("Node", {"label": TEXT, "next": RefTo("Node"), "links": SetOf("Node")}))
    return registry


@pytest.fixture
def clock():
    return TickClock()


@pytest.fixture
def registry():
    return hospital_registry()


@pytest.fixture
def store(registry, clock):
    return MemoryStore(registry=registry, clock=clock)


@pytest.fixture
def service(store):
    return get_or_create_role(store, SUPER_USER, "HospitalService", "HospitalService")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
