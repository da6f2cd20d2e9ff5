"""Heart-rate monitoring scenario: a sensor, a family member and a medic.

Three workers share one store. The sensor batches synthetic samples into the
patient's record, the family member polls the latest sample read-only, and
the medic periodically pulls the whole series. With a :class:`VirtualClock`
all timers are driven deterministically while the workers still run on real
threads.
"""

from __future__ import annotations

import csv
import datetime as _dt
import heapq
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

from .codec import Timestamp
from .errors import Conflicted, CorruptLog, SmartStoreError
from .integrity import verify_integrity
from .roles import get_or_create_role, role_of
from .schema import (
    DATE_AND_TIME,
    FLOAT,
    ROLE_ENTITY,
    TEXT,
    CompositeType,
    ConcreteRole,
    DomainPredicate,
    EntitySchema,
    RefTo,
    SchemaRegistry,
    SetOf,
    SUPER_USER,
)
from .store import BackendConfig, MemoryStore, Mode, open_backend
from .transaction import with_role_do_transaction

log = logging.getLogger(__name__)

DEMO_EPOCH_US = Timestamp.from_datetime(_dt.datetime(2020, 9, 29, tzinfo=_dt.timezone.utc)).micros

BPM_MIN, BPM_MAX = 20.0, 250.0

HEART_RATE_SAMPLE = CompositeType(
    "HeartRateSample", (("timestamp", DATE_AND_TIME), ("beatsPerMinute", FLOAT))
)


@dataclass(frozen=True)
class HeartRateSample:
    timestamp: Timestamp
    beats_per_minute: float

    def __post_init__(self):
        if not math.isfinite(self.beats_per_minute) or self.beats_per_minute <= 0:
            raise ValueError(f"beats per minute must be finite and positive, got {self.beats_per_minute}")

    def to_value(self) -> dict:
        return {"timestamp": self.timestamp, "beatsPerMinute": float(self.beats_per_minute)}

    @classmethod
    def from_value(cls, value: dict) -> HeartRateSample:
        return cls(value["timestamp"], value["beatsPerMinute"])


def _samples_in_range(slots: dict, view) -> bool:
    return all(BPM_MIN <= s["beatsPerMinute"] <= BPM_MAX for s in slots["heartRateSamples"])


def _samples_chronological(slots: dict, view) -> bool:
    stamps = [s["timestamp"] for s in slots["heartRateSamples"]]
    return all(a <= b for a, b in zip(stamps, stamps[1:]))


def build_registry() -> SchemaRegistry:
    """Registry with the scenario's role-entities."""
    registry = SchemaRegistry()
    registry.register(EntitySchema("Individual", {"names": TEXT, "surnames": TEXT}, parent=ROLE_ENTITY))
    registry.register(
        EntitySchema(
            "Patient",
            {"medics": SetOf("Medic"), "heartRateSamples": SetOf(HEART_RATE_SAMPLE)},
            parent="Individual",
            constraints=(
                DomainPredicate("heart-rate-in-range", _samples_in_range),
                DomainPredicate("samples-chronological", _samples_chronological),
            ),
        )
    )
    registry.register(EntitySchema("Medic", {"patients": SetOf("Patient")}, parent="Individual"))
    registry.register(EntitySchema("HeartRateSensor", {"patient": RefTo("Patient")}, parent=ROLE_ENTITY))
    return registry


def synth_bpm(t: float, seed: int, index: int = 0, noise: bool = True) -> float:
    """Synthetic heart rate at ``t`` seconds: two sines around 70 bpm plus uniform noise.

    The noise term is drawn from a generator seeded by ``(seed, index)`` so a
    sample's value never depends on what else was generated.
    """
    value = 70.0 + 5.0 * math.sin(2 * math.pi * t / 60.0) + 2.0 * math.sin(2 * math.pi * t / 7.0)
    if noise:
        value += random.Random(f"{seed}:{index}").uniform(-1.0, 1.0)
    return value


# -- clocks -------------------------------------------------------------------


class VirtualClock:
    """Shared simulated time for a fixed set of participant threads.

    Time only moves when every registered participant is blocked in
    :meth:`sleep_until`; it then jumps to the earliest requested wake-up.
    Work done between sleeps therefore takes zero simulated time.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._now = 0
        self._participants = 0
        self._sleepers: list[int] = []

    def now_us(self) -> int:
        return self._now

    def register(self) -> None:
        with self._cond:
            self._participants += 1

    def unregister(self) -> None:
        with self._cond:
            self._participants -= 1
            self._advance()

    def _advance(self) -> None:
        if self._participants and len(self._sleepers) >= self._participants:
            target = self._sleepers[0]
            if target > self._now:
                self._now = target
        self._cond.notify_all()

    def sleep_until(self, t_us: int) -> None:
        with self._cond:
            if t_us <= self._now:
                return
            heapq.heappush(self._sleepers, t_us)
            self._advance()
            while self._now < t_us:
                self._cond.wait()
            self._sleepers.remove(t_us)
            heapq.heapify(self._sleepers)


class WallClock:
    def __init__(self):
        self._start = time.monotonic()

    def now_us(self) -> int:
        return int((time.monotonic() - self._start) * 1_000_000)

    def register(self) -> None:
        pass

    def unregister(self) -> None:
        pass

    def sleep_until(self, t_us: int) -> None:
        delay = (t_us - self.now_us()) / 1_000_000
        if delay > 0:
            time.sleep(delay)


# -- configuration and results --------------------------------------------------


@dataclass
class DemoConfig:
    duration: float = 10.0  # simulated seconds
    sample_rate: float = 10.0  # samples per second
    batch_size: int = 50
    poll_period: int = 500  # ms
    seed: int = 0
    output_path: str | None = None
    mode: Mode = Mode.ACID
    store: str = "mem"
    clock: str = "virtual"
    medic_period: float = 5.0  # seconds between medic checks

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.poll_period < 1:
            raise ValueError("poll_period must be at least 1 ms")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.clock not in ("virtual", "wall"):
            raise ValueError("clock must be 'virtual' or 'wall'")
        if not self.medic_period > 0:
            raise ValueError("medic_period must be positive")


@dataclass
class DemoReport:
    samples_written: int = 0
    batches_committed: int = 0
    polls_performed: int = 0
    polls_aborted_empty: int = 0
    medic_rows: int = 0
    conflicts: int = 0
    final_integrity: bool = False
    patient_history_length: int = 0
    records: int = 0
    integrity_summary: str = ""
    worker_errors: list[str] = field(default_factory=list)
    exit_code: int = 0
    store: Any = field(default=None, repr=False, compare=False)
    samples: list[HeartRateSample] = field(default_factory=list, repr=False, compare=False)
    sensor_log: list[HeartRateSample] = field(default_factory=list, repr=False, compare=False)
    liveness_transitions: list[tuple[int, HeartRateSample]] = field(default_factory=list, repr=False, compare=False)

    def summary(self) -> str:
        lines = [
            f"samples written      {self.samples_written}",
            f"batches committed    {self.batches_committed}",
            f"polls performed      {self.polls_performed} ({self.polls_aborted_empty} empty)",
            f"medic rows           {self.medic_rows}",
            f"conflicts            {self.conflicts}",
            f"patient history      {self.patient_history_length} versions",
            f"records stored       {self.records}",
            f"integrity            {self.integrity_summary}",
        ]
        lines += [f"worker error         {e}" for e in self.worker_errors]
        return "\n".join(lines)


class DemoRoles(NamedTuple):
    patient: ConcreteRole
    son: ConcreteRole
    medic: ConcreteRole
    sensor: ConcreteRole


# -- scenario steps ---------------------------------------------------------------


def bootstrap_demo_store(store: MemoryStore) -> DemoRoles:
    """Create the three people as super-user, then wire patient, medic and watch as the medic."""
    if len(store):
        raise SmartStoreError("bootstrap needs an empty store")
    patient = get_or_create_role(store, SUPER_USER, "Patient", "Patient")
    son = get_or_create_role(store, SUPER_USER, "Individual", "PatientSon")
    medic = get_or_create_role(store, SUPER_USER, "Medic", "Cardiologist")

    def wire(tx):
        sensor = tx.get_or_create("HeartRateSensor", patient.nominative.child("watch"))
        p = tx.read_entity(patient.nominative)
        m = tx.read_entity(medic.nominative)
        sensor["patient"] = p
        p.add_to("medics", m)
        m.add_to("patients", p)
        tx.commit()

    with_role_do_transaction(store, medic, wire).raise_for_status()
    return DemoRoles(
        role_of(store, patient.nominative),
        son,
        role_of(store, medic.nominative),
        role_of(store, patient.nominative.child("watch")),
    )


def medic_fetch_dataset(store: MemoryStore, medic_role: ConcreteRole) -> list[HeartRateSample]:
    """All samples of the medic's first patient, read in a transaction that never commits."""

    def fetch(tx):
        medic = tx.read_entity(medic_role.nominative)
        patients = medic["patients"]
        if not patients:
            tx.abort()
        patient = tx.resolve_reference(patients[0]).last_version()
        return [HeartRateSample.from_value(v) for v in patient["heartRateSamples"]]

    outcome = with_role_do_transaction(store, medic_role, fetch)
    if outcome.error is not None:
        raise outcome.error
    return outcome.value or []


def write_csv(samples: list[HeartRateSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp_us", "beats_per_minute"])
        for s in sorted(samples, key=lambda s: s.timestamp):
            writer.writerow([s.timestamp.micros, repr(s.beats_per_minute)])


class _Worker(threading.Thread):
    def __init__(self, name: str, store: MemoryStore, config: DemoConfig, clock, stop: threading.Event):
        super().__init__(name=name, daemon=True)
        self.store = store
        self.config = config
        self.clock = clock
        self.stop_event = stop
        self.error: BaseException | None = None
        self.duration_us = int(round(config.duration * 1_000_000))

    def run(self):
        try:
            self.work()
        except BaseException as exc:
            self.error = exc
            self.stop_event.set()
            log.exception("%s failed", self.name)
        finally:
            self.clock.unregister()

    def work(self):
        raise NotImplementedError


class SensorWorker(_Worker):
    """Samples at ``sample_rate`` and commits every ``batch_size`` samples."""

    def __init__(self, store, role: ConcreteRole, config, clock, stop, epoch_us: int):
        super().__init__("sensor", store, config, clock, stop)
        self.role = role
        self.epoch_us = epoch_us
        self.log: list[HeartRateSample] = []
        self.samples_written = 0
        self.batches_committed = 0
        self.conflicts = 0

    def sample_time_us(self, index: int) -> int:
        return int(round(index * 1_000_000 / self.config.sample_rate))

    def work(self):
        batch: list[HeartRateSample] = []
        index = 0
        while not self.stop_event.is_set():
            t_us = self.sample_time_us(index)
            if t_us >= self.duration_us:
                break
            self.clock.sleep_until(t_us)
            sample = HeartRateSample(
                Timestamp(self.epoch_us + t_us), synth_bpm(t_us / 1_000_000, self.config.seed, index)
            )
            self.log.append(sample)
            batch.append(sample)
            if len(batch) >= self.config.batch_size:
                self.submit(batch)
                batch = []
            index += 1
        if batch:
            self.submit(batch)

    def submit(self, batch: list[HeartRateSample]) -> None:
        values = [s.to_value() for s in batch]

        def send(tx):
            sensor = tx.read_entity(self.role.nominative)
            patient = tx.resolve_reference(sensor["patient"]).last_version()
            patient.add_to("heartRateSamples", *values)
            tx.commit()

        outcome = None
        for _ in range(2):  # one retry with a fresh snapshot
            outcome = with_role_do_transaction(self.store, self.role, send)
            if outcome.committed:
                self.batches_committed += 1
                self.samples_written += len(batch)
                return
            if not outcome.conflicted:
                break
            self.conflicts += 1
        outcome.raise_for_status()


class LivenessWorker(_Worker):
    """Polls the patient's latest sample every ``poll_period`` ms; never commits."""

    def __init__(self, store, role: ConcreteRole, patient: ConcreteRole, config, clock, stop):
        super().__init__("liveness", store, config, clock, stop)
        self.role = role
        self.patient = patient
        self.status: HeartRateSample | None = None
        self.transitions: list[tuple[int, HeartRateSample]] = []
        self.polls = 0
        self.aborted_empty = 0
        self.failures = 0

    def poll(self) -> None:
        def step(tx):
            samples = tx.read_entity(self.patient.nominative)["heartRateSamples"]
            if not samples:
                tx.abort()
            return HeartRateSample.from_value(samples[-1])

        outcome = with_role_do_transaction(self.store, self.role, step)
        self.polls += 1
        if outcome.error is not None:
            self.failures += 1
            log.warning("liveness poll failed: %r", outcome.error)
            return
        if outcome.value is None:
            self.aborted_empty += 1
            return
        if outcome.value != self.status:
            self.status = outcome.value
            self.transitions.append((self.clock.now_us(), outcome.value))

    def work(self):
        period_us = self.config.poll_period * 1000
        t_us = 0
        while t_us < self.duration_us and not self.stop_event.is_set():
            self.clock.sleep_until(t_us)
            self.poll()
            t_us += period_us


class MedicWorker(_Worker):
    """Pulls the full data set every ``medic_period`` seconds."""

    def __init__(self, store, role: ConcreteRole, config, clock, stop):
        super().__init__("medic", store, config, clock, stop)
        self.role = role
        self.fetches = 0
        self.last_rows = 0

    def work(self):
        period_us = int(round(self.config.medic_period * 1_000_000))
        t_us = period_us
        while t_us < self.duration_us and not self.stop_event.is_set():
            self.clock.sleep_until(t_us)
            self.last_rows = len(medic_fetch_dataset(self.store, self.role))
            self.fetches += 1
            t_us += period_us


def run_demo(config: DemoConfig) -> DemoReport:
    """Bootstrap a store, run the three workers to completion, export and verify."""
    clock = VirtualClock() if config.clock == "virtual" else WallClock()
    epoch_us = DEMO_EPOCH_US
    if config.clock == "wall":
        epoch_us = Timestamp.from_datetime(_dt.datetime.now(_dt.timezone.utc)).micros

    def store_clock() -> Timestamp:
        return Timestamp(epoch_us + clock.now_us())

    report = DemoReport()
    try:
        backend = BackendConfig.parse(config.store, mode=config.mode, clock=store_clock, registry=build_registry())
        store = open_backend(backend)
    except CorruptLog as exc:
        report.worker_errors.append(str(exc))
        report.exit_code = 4
        return report
    report.store = store
    try:
        roles = bootstrap_demo_store(store)
        stop = threading.Event()
        sensor = SensorWorker(store, roles.sensor, config, clock, stop, epoch_us)
        liveness = LivenessWorker(store, roles.son, roles.patient, config, clock, stop)
        medic = MedicWorker(store, roles.medic, config, clock, stop)
        workers = [sensor, liveness, medic]
        for w in workers:
            clock.register()
        for w in workers:
            w.start()
        for w in workers:
            w.join()

        samples = medic_fetch_dataset(store, roles.medic)
        if config.output_path:
            write_csv(samples, config.output_path)
        integrity = verify_integrity(store)

        report.samples_written = sensor.samples_written
        report.batches_committed = sensor.batches_committed
        report.polls_performed = liveness.polls
        report.polls_aborted_empty = liveness.aborted_empty
        report.medic_rows = len(samples)
        report.conflicts = sensor.conflicts
        report.final_integrity = integrity.passed
        report.integrity_summary = integrity.summary()
        report.patient_history_length = len(store.history(roles.patient.nominative))
        report.records = len(store)
        report.samples = samples
        report.sensor_log = list(sensor.log)
        report.liveness_transitions = list(liveness.transitions)
        for w in workers:
            if w.error is not None:
                report.worker_errors.append(f"{w.name}: {w.error!r}")
        if any(isinstance(w.error, Conflicted) for w in workers):
            report.exit_code = 3
        elif report.worker_errors:
            report.exit_code = 1
        elif not integrity.passed:
            report.exit_code = 2
    finally:
        store.close()
    return report
