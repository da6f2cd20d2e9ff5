import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TickClock, hospital_registry
from smartstore.codec import Timestamp
from smartstore.demo import DemoConfig, build_registry, run_demo
from smartstore.errors import AlreadyInvalid, NotFound, UnknownStrategy
from smartstore.integrity import (
    BIT_LEVEL,
    DOMAIN,
    STRUCTURAL,
    cascade_revalidate,
    dependents_of,
    revoke,
    scan_dependents,
    verify_integrity,
)
from smartstore.records import NominativeId, Origin, StoredRecord, VersionedId, entity_payload
from smartstore.roles import get_or_create_role
from smartstore.schema import SUPER_USER
from smartstore.store import FileStore, MemoryStore
from smartstore.transaction import origin_of, with_role_do_transaction


def hand_put(store, name, schema, slots):
    """Append a record straight through the store, bypassing the transaction checks."""
    n = NominativeId.parse(name)
    current = store.head_version(n)
    vid = VersionedId(n, (current or 0) + 1)
    originators = {k: "tamperer" for k in slots}
    rec = StoredRecord.create(
        vid,
        entity_payload(schema, slots, originators),
        Origin(store.next_transaction_id(), "tamperer", Timestamp(0), "role:tamperer"),
        VersionedId(n, current) if current else None,
    )
    store.put_record(rec)
    assert store.advance_head(n, current, vid.version)
    return vid


def build_nodes(store, edges, labels=None):
    """Create Node objects; ``edges`` maps a node to the node its ``next`` slot points at."""
    names = sorted(set(edges) | set(edges.values()))

    def body(tx):
        handles = {n: tx.create_entity("Node", n) for n in names}
        for n, h in handles.items():
            h["label"] = (labels or {}).get(n, n)
        for src, dst in edges.items():
            handles[src]["next"] = handles[dst]
        tx.commit()

    with_role_do_transaction(store, SUPER_USER, body).raise_for_status()


def relabel(store, role, name, label):
    def body(tx):
        tx.read_entity(name)["label"] = label
        tx.commit()

    with_role_do_transaction(store, role, body).raise_for_status()


@pytest.fixture(scope="module")
def demo_report():
    return run_demo(DemoConfig(duration=10, sample_rate=10, batch_size=50, seed=42))


# -- verification -------------------------------------------------------------------------


def test_clean_demo_store_passes(demo_report):
    report = verify_integrity(demo_report.store)
    assert report.passed and report.violations == []
    assert report.checked == len(demo_report.store.heads())


def test_empty_subset():
    report = verify_integrity(MemoryStore(), [])
    assert report.checked == 0 and report.passed


def test_unknown_name_in_subset(store):
    report = verify_integrity(store, ["ghost"])
    assert [v.category for v in report.violations] == [STRUCTURAL]


def test_structural_fault_only():
    store = MemoryStore(registry=hospital_registry(), clock=TickClock())
    build_nodes(store, {"a": "b"})
    hand_put(store, "c", "Counter", {"value": "not a number"})
    report = verify_integrity(store)
    assert [v.category for v in report.violations] == [STRUCTURAL]
    assert report.violations[0].id == VersionedId.parse("c@1")


def test_domain_fault_only():
    store = MemoryStore(registry=build_registry(), clock=TickClock())
    sample = {"timestamp": Timestamp(1), "beatsPerMinute": 300.0}
    hand_put(store, "P", "Patient", {"names": "", "surnames": "", "medics": [], "heartRateSamples": [sample]})
    report = verify_integrity(store)
    assert [v.category for v in report.violations] == [DOMAIN]
    assert "heart-rate-in-range" in report.violations[0].detail


def test_bit_flip_fault_only(tmp_path):
    path = tmp_path / "store.log"
    with FileStore(path, registry=hospital_registry(), clock=TickClock()) as store:
        build_nodes(store, {"a": "b"}, labels={"a": "alpha-marker", "b": "beta"})
    data = bytearray(path.read_bytes())
    data[data.index(b"alpha-marker")] ^= 0x04
    path.write_bytes(bytes(data))
    with FileStore(path, recovery="quarantine", registry=hospital_registry()) as damaged:
        report = verify_integrity(damaged)
    assert [(str(v.id), v.category) for v in report.violations] == [("a@1", BIT_LEVEL)]


def test_damaged_history_reported(tmp_path):
    path = tmp_path / "store.log"
    with FileStore(path, registry=hospital_registry(), clock=TickClock()) as store:
        build_nodes(store, {"a": "b"}, labels={"a": "old-marker"})
        relabel(store, SUPER_USER, "a", "fresh")
    data = bytearray(path.read_bytes())
    data[data.index(b"old-marker")] ^= 0x01
    path.write_bytes(bytes(data))
    with FileStore(path, recovery="quarantine", registry=hospital_registry()) as damaged:
        report = verify_integrity(damaged)
    assert [(str(v.id), v.category) for v in report.violations] == [("a@1", BIT_LEVEL)]


@settings(max_examples=30, deadline=None)
@given(st.sets(st.sampled_from([STRUCTURAL, DOMAIN]), max_size=2))
def test_conjunction_over_categories(faults):
    store = MemoryStore(registry=build_registry(), clock=TickClock())
    hand_put(store, "ok", "Individual", {"names": "a", "surnames": "b"})
    if STRUCTURAL in faults:
        hand_put(store, "s", "Individual", {"names": 1, "surnames": "b"})
    if DOMAIN in faults:
        sample = {"timestamp": Timestamp(1), "beatsPerMinute": 10.0}
        hand_put(store, "d", "Patient", {"names": "", "surnames": "", "medics": [], "heartRateSamples": [sample]})
    report = verify_integrity(store)
    assert report.passed == (not faults)
    assert {v.category for v in report.violations} == faults


# -- dependency index -------------------------------------------------------------------------


def test_dependents_in_demo_store(demo_report):
    store = demo_report.store
    deps = dependents_of(store, "Patient")
    assert {NominativeId.parse("Patient/watch"), NominativeId.parse("Cardiologist")} <= deps
    assert dependents_of(store, "PatientSon") == set()
    for n in store.heads():
        assert dependents_of(store, n) == scan_dependents(store, n)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")), max_size=8))
def test_index_matches_full_scan(rewires):
    store = MemoryStore(registry=hospital_registry(), clock=TickClock())
    build_nodes(store, {"a": "b", "b": "c", "c": "d"})
    for src, dst in rewires:
        def body(tx, src=src, dst=dst):
            tx.read_entity(src)["next"] = tx.read_entity(dst)
            tx.commit()

        with_role_do_transaction(store, SUPER_USER, body).raise_for_status()
    for n in "abcd":
        assert dependents_of(store, n) == scan_dependents(store, n)


# -- revocation ---------------------------------------------------------------------------


def test_revoke_appends_invalid_copy(store):
    auditor = get_or_create_role(store, SUPER_USER, "HospitalService", "Auditor")
    build_nodes(store, {"trial": "drug"})
    before = store.encoded_snapshot()
    new = revoke(store, auditor, "trial@1", "flawed experiment")
    assert new == VersionedId.parse("trial@2") and store.head("trial") == new
    head = store.head_record("trial")
    assert not head.status.valid and head.status.reason == "flawed experiment"
    assert head.payload == store.get_record(VersionedId.parse("trial@1")).payload
    assert store.get_record(VersionedId.parse("trial@1")).status.valid
    assert [r.id.version for r in store.history("trial")] == [2, 1]
    after = store.encoded_snapshot()
    assert all(after[k] == v for k, v in before.items())
    origin = origin_of(store, new)
    assert origin.role == "Auditor" and origin.permission_token == "role:Auditor"
    assert verify_integrity(store, ["trial"]).passed
    with pytest.raises(AlreadyInvalid):
        revoke(store, auditor, "trial@1", "again")
    with pytest.raises(AlreadyInvalid):
        revoke(store, auditor, "trial@2", "again")
    with pytest.raises(NotFound):
        revoke(store, auditor, "trial@9", "missing")


# -- cascade ------------------------------------------------------------------------------


def test_dag_cascade_repairs_in_topological_order(store):
    # c -> b -> a : revoking a@1 after a newer valid a exists re-points b, then c
    auditor = get_or_create_role(store, SUPER_USER, "HospitalService", "Auditor")
    build_nodes(store, {"c": "b", "b": "a"})
    relabel(store, SUPER_USER, "a", "a2")
    before = store.encoded_snapshot()
    outcome = cascade_revalidate(store, auditor, ["a"], max_rounds=3)
    assert outcome.order == [NominativeId.parse(n) for n in "abc"]
    assert outcome.rounds_used == 1 and not outcome.cyclic
    assert outcome.repaired == {NominativeId.parse("b"), NominativeId.parse("c")}
    assert outcome.invalidated == set() and outcome.unresolved == set()
    assert [str(v) for v in outcome.written] == ["b@2", "c@2"]
    assert store.head_record("b").slots["next"].target == "a@2"
    assert store.head_record("c").slots["next"].target == "b@2"
    after = store.encoded_snapshot()
    assert all(after[k] == v for k, v in before.items())
    txids = [origin_of(store, v).transaction_id for v in outcome.written]
    assert len(set(txids)) == 2 and all(origin_of(store, v).role == "Auditor" for v in outcome.written)
    assert verify_integrity(store).passed


def test_dag_cascade_invalidates_after_revocation(store):
    auditor = get_or_create_role(store, SUPER_USER, "HospitalService", "Auditor")
    build_nodes(store, {"c": "b", "b": "a"})
    revoke(store, auditor, "a@1", "bad source")
    outcome = cascade_revalidate(store, auditor, ["a"], reason="source revoked")
    assert outcome.invalidated == {NominativeId.parse("b"), NominativeId.parse("c")}
    assert outcome.repaired == set() and outcome.rounds_used == 1
    order = [str(n) for n in outcome.order]
    assert order.index("a") < order.index("b") < order.index("c")
    assert len(outcome.written) == 2
    for n in "bc":
        head = store.head_record(n)
        assert not head.status.valid and head.status.reason.startswith("source revoked")


def test_two_cycle_stays_unresolved(store):
    auditor = get_or_create_role(store, SUPER_USER, "HospitalService", "Auditor")
    build_nodes(store, {"a": "b", "b": "a"})
    relabel(store, SUPER_USER, "a", "a2")
    outcome = cascade_revalidate(store, auditor, ["a"], max_rounds=3)
    assert outcome.cyclic and outcome.rounds_used == 3
    assert outcome.unresolved == {NominativeId.parse("a"), NominativeId.parse("b")}
    assert outcome.invalidated.isdisjoint(outcome.repaired)
    assert len(outcome.written) == 3


@pytest.mark.parametrize("rounds", [1, 2, 5])
def test_cycle_rounds_are_bounded(store, rounds):
    build_nodes(store, {"a": "b", "b": "a"})
    relabel(store, SUPER_USER, "a", "a2")
    outcome = cascade_revalidate(store, SUPER_USER, ["a"], max_rounds=rounds)
    assert outcome.rounds_used == rounds and outcome.unresolved


def test_seed_without_dependents(store):
    build_nodes(store, {"a": "b"})
    before = store.record_set_digest()
    outcome = cascade_revalidate(store, SUPER_USER, ["a"])
    assert outcome.order == [NominativeId.parse("a")]
    assert outcome.written == [] and store.record_set_digest() == before


def test_cascade_argument_errors(store):
    build_nodes(store, {"a": "b"})
    with pytest.raises(UnknownStrategy):
        cascade_revalidate(store, SUPER_USER, ["a"], strategy="eager")
    with pytest.raises(NotImplementedError):
        cascade_revalidate(store, SUPER_USER, ["a"], strategy="steady-state")
    with pytest.raises(ValueError):
        cascade_revalidate(store, SUPER_USER, ["a"], max_rounds=0)
    with pytest.raises(NotFound):
        cascade_revalidate(store, SUPER_USER, ["ghost"])
