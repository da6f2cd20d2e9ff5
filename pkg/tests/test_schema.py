import datetime as dt

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import START, TickClock, hospital_registry
from smartstore.codec import Reference, Timestamp, encode_canonical
from smartstore.demo import HEART_RATE_SAMPLE, HeartRateSample, build_registry
from smartstore.errors import (
    DuplicateSchemaName,
    DuplicateSlot,
    InheritanceCycle,
    IntegrityRejected,
    SchemaNotRole,
    TypeMismatch,
    UnknownParent,
    UnknownSchema,
)
from smartstore.records import VersionedId
from smartstore.roles import get_or_create_role
from smartstore.schema import (
    FLOAT,
    INTEGER,
    ROLE_ENTITY,
    SUPER_USER,
    TEXT,
    CompositeType,
    DomainPredicate,
    EntitySchema,
    SchemaRegistry,
    SetOf,
    tree_shaped,
)
from smartstore.store import MemoryStore
from smartstore.transaction import with_role_do_transaction

ADMITTED_PATIENT = {
    "names": "John",
    "surnames": "Doe",
    "birthDate": Timestamp.from_datetime(dt.date(2000, 1, 1)),
    "address": "25 av marechal foch",
}


# -- registration ------------------------------------------------------------------


def test_patient_has_four_effective_slots():
    registry = build_registry()
    assert set(registry.effective_slots("Patient")) == {"names", "surnames", "medics", "heartRateSamples"}


def test_effective_slots_are_parent_plus_own():
    registry = build_registry()
    for name in registry.names():
        schema = registry.get(name)
        own = {s.name for s in schema.slots}
        inherited = set(registry.effective_slots(schema.parent)) if schema.parent else set()
        assert set(registry.effective_slots(name)) == inherited | own
        assert not inherited & own


def test_registration_errors():
    registry = SchemaRegistry()
    registry.register(EntitySchema("A", {"x": TEXT}))
    with pytest.raises(DuplicateSchemaName):
        registry.register(EntitySchema("A"))
    with pytest.raises(InheritanceCycle):
        registry.register(EntitySchema("Loop", parent="Loop"))
    with pytest.raises(UnknownParent):
        registry.register(EntitySchema("B", parent="Missing"))
    with pytest.raises(DuplicateSlot):
        registry.register(EntitySchema("C", {"x": INTEGER}, parent="A"))
    with pytest.raises(DuplicateSlot):
        CompositeType("Pair", (("a", TEXT), ("a", FLOAT)))
    with pytest.raises(UnknownSchema):
        registry.get("Nope")


def test_role_lineage():
    registry = build_registry()
    assert registry.is_role("Patient") and registry.is_role("HeartRateSensor")
    assert registry.is_subtype("Patient", "Individual")
    assert not registry.is_subtype("Medic", "Patient")


# -- structural checks -------------------------------------------------------------------


def test_admitted_patient_typechecks(registry):
    assert registry.typecheck("Patient", ADMITTED_PATIENT).ok


def test_date_in_address_slot_is_one_violation(registry):
    result = registry.typecheck("Patient", {**ADMITTED_PATIENT, "address": Timestamp(0)})
    assert [v.path for v in result.violations] == ["address"]


@pytest.mark.parametrize("drop", sorted(ADMITTED_PATIENT))
def test_missing_slot_is_named(registry, drop):
    payload = {k: v for k, v in ADMITTED_PATIENT.items() if k != drop}
    result = registry.typecheck("Patient", payload)
    missing = set(registry.effective_slots("Patient")) - set(payload)
    assert {v.path for v in result.violations} == missing == {drop}


def test_all_violations_reported(registry):
    payload = {"names": 1, "birthDate": "yesterday", "address": "x", "extra": None}
    paths = {v.path for v in registry.typecheck("Patient", payload).violations}
    assert paths == {"names", "surnames", "birthDate", "extra"}
    assert not registry.typecheck("Patient", [1, 2]).ok


def test_references_checked_against_view():
    registry = build_registry()
    store = MemoryStore(registry=registry, clock=TickClock())
    sensor = {"patient": Reference("Ghost@1")}
    assert registry.typecheck("HeartRateSensor", sensor).ok  # no view: shape only
    from smartstore.store import ReadOnlyStoreView

    violations = registry.typecheck("HeartRateSensor", sensor, ReadOnlyStoreView(store)).violations
    assert len(violations) == 1 and "missing" in violations[0].message


def test_normalize_coercions():
    registry = build_registry()
    assert registry.normalize(FLOAT, 3) == 3.0
    assert registry.normalize(HEART_RATE_SAMPLE, HeartRateSample(Timestamp(1), 70.0)) == {
        "timestamp": Timestamp(1),
        "beatsPerMinute": 70.0,
    }
    with pytest.raises(TypeMismatch):
        registry.normalize(INTEGER, True)
    with pytest.raises(TypeMismatch):
        registry.normalize(TEXT, 1.5)
    with pytest.raises(TypeMismatch):
        registry.normalize(HEART_RATE_SAMPLE, {"timestamp": Timestamp(1)})


# -- domain constraints ----------------------------------------------------------------------


def in_range(slots, view):
    return all(20.0 <= s["beatsPerMinute"] <= 250.0 for s in slots["heartRateSamples"])


def test_zero_constraints_pass(registry):
    assert registry.constraints_for("Patient") == []
    assert registry.check_domain_constraints("Patient", ADMITTED_PATIENT, None).ok


@pytest.mark.parametrize("bpm,ok", [(72.0, True), (-5.0, False), (20.0, True), (250.0, True), (250.5, False)])
def test_heart_rate_range(bpm, ok):
    registry = build_registry()
    slots = {
        "names": "",
        "surnames": "",
        "medics": [],
        "heartRateSamples": [{"timestamp": Timestamp(0), "beatsPerMinute": bpm}],
    }
    result = registry.check_domain_constraints("Patient", slots, None)
    assert result.ok is ok is in_range(slots, None)
    if not ok:
        assert [v.path for v in result.violations] == ["heart-rate-in-range"]


ENTRY = CompositeType("Entry", (("kind", TEXT), ("amount", FLOAT), ("pair", INTEGER)))


def paired(slots, view):
    """Every income has an outcome with the same pair id and amount."""
    entries = slots["entries"]
    incomes = [e for e in entries if e["kind"] == "income"]
    outcomes = {(e["pair"], e["amount"]) for e in entries if e["kind"] == "outcome"}
    return all((e["pair"], e["amount"]) in outcomes for e in incomes)


@pytest.mark.parametrize(
    "entries,ok",
    [
        ([("income", 10.0, 1), ("outcome", 10.0, 1)], True),
        ([("income", 10.0, 1), ("income", 10.0, 1)], False),
        ([("income", 10.0, 1), ("outcome", 9.0, 1)], False),
        ([("outcome", 10.0, 1), ("outcome", 10.0, 2)], True),
    ],
)
def test_paired_entry_ledger(entries, ok):
    registry = SchemaRegistry()
    registry.register(EntitySchema("Ledger", {"entries": SetOf(ENTRY)}, constraints=[DomainPredicate("paired", paired)]))
    slots = {"entries": [ENTRY.make(kind=k, amount=a, pair=p) for k, a, p in entries]}
    assert registry.typecheck("Ledger", slots).ok
    assert registry.check_domain_constraints("Ledger", slots, None).ok is ok


@pytest.mark.parametrize("outcomes", [(), (True,), (False,), (True, True, True), (True, False, True), (False, False, True)])
def test_constraint_conjunction(outcomes):
    predicates = [DomainPredicate(f"p{i}", lambda s, v, r=r: r) for i, r in enumerate(outcomes)]
    registry = SchemaRegistry()
    registry.register(EntitySchema("Base", {"x": INTEGER}, constraints=predicates[:1]))
    registry.register(EntitySchema("Child", {}, parent="Base", constraints=predicates[1:]))
    result = registry.check_domain_constraints("Child", {"x": 0}, None)
    assert result.ok is all(outcomes)
    assert {v.path for v in result.violations} == {f"p{i}" for i, r in enumerate(outcomes) if not r}


def test_crashing_predicate_is_a_failure():
    registry = SchemaRegistry()
    registry.register(EntitySchema("A", {"x": INTEGER}, constraints=[DomainPredicate("boom", lambda s, v: 1 / 0)]))
    (violation,) = registry.check_domain_constraints("A", {"x": 1}, None).violations
    assert violation.path == "boom" and "ZeroDivisionError" in violation.message


def test_tree_shape_predicate_rejects_cycles():
    registry = SchemaRegistry()
    registry.register(EntitySchema("TreeNode", {"children": SetOf("TreeNode")}, constraints=[tree_shaped("children")]))
    store = MemoryStore(registry=registry, clock=TickClock())

    def build(tx):
        a = tx.create_entity("TreeNode", "a")
        b = tx.create_entity("TreeNode", "b")
        c = tx.create_entity("TreeNode", "c")
        a.add_to("children", b, c)
        tx.commit()

    assert with_role_do_transaction(store, SUPER_USER, build).committed

    def close_loop(tx):
        tx.read_entity("b").add_to("children", tx.read_entity("a"))
        tx.commit()

    outcome = with_role_do_transaction(store, SUPER_USER, close_loop)
    assert outcome.status == "rejected" and isinstance(outcome.error, IntegrityRejected)

    def share_child(tx):
        tx.read_entity("b").add_to("children", tx.read_entity("c"))
        tx.commit()

    # b -> c is still a tree from b's point of view
    assert with_role_do_transaction(store, SUPER_USER, share_child).committed


# -- serialization ---------------------------------------------------------------------------


def test_heart_rate_sample_roundtrip():
    registry = SchemaRegistry()
    registry.register(EntitySchema("Holder", {"sample": HEART_RATE_SAMPLE, "none": SetOf(HEART_RATE_SAMPLE)}))
    state = {"sample": HeartRateSample(Timestamp(123), 72.5).to_value(), "none": []}
    doc = registry.serialize_entity("Holder", state)
    assert doc["none"] == []
    assert registry.deserialize_entity("Holder", doc) == state


def test_serialize_rejects_mismatched_state(registry):
    with pytest.raises(TypeMismatch):
        registry.serialize_entity("Patient", {"names": "x"})


refs = st.builds(lambda n, v: VersionedId.parse(f"Medic{n}@{v}"), st.integers(0, 5), st.integers(1, 9))
samples = st.builds(
    lambda t, b: {"timestamp": Timestamp(t), "beatsPerMinute": b},
    st.integers(0, 2**40),
    st.floats(1.0, 300.0),
)
patient_states = st.fixed_dictionaries(
    {
        "names": st.text(max_size=10),
        "surnames": st.text(max_size=10),
        "medics": st.lists(refs, max_size=4),
        "heartRateSamples": st.lists(samples, max_size=6),
    }
)


@settings(max_examples=1000, deadline=None)
@given(patient_states)
def test_random_patient_states_roundtrip(state):
    registry = build_registry()
    doc = registry.serialize_entity("Patient", state)
    assert registry.typecheck("Patient", doc).ok
    back = registry.deserialize_entity("Patient", doc)
    assert back == state
    assert encode_canonical(registry.serialize_entity("Patient", back)) == encode_canonical(doc)


@settings(max_examples=300, deadline=None)
@given(
    st.dictionaries(
        st.sampled_from(["names", "surnames", "birthDate", "address", "other"]),
        st.one_of(st.text(max_size=3), st.integers(), st.builds(Timestamp, st.integers(0, 10)), st.none()),
    )
)
def test_typecheck_soundness(payload):
    registry = hospital_registry()
    result = registry.typecheck("Patient", payload)
    if result.ok:
        state = registry.deserialize_entity("Patient", payload)
        assert encode_canonical(registry.serialize_entity("Patient", state)) == encode_canonical(payload)
    else:
        with pytest.raises(TypeMismatch):
            registry.deserialize_entity("Patient", payload)
        assert all(v.path for v in result.violations)


# -- roles ------------------------------------------------------------------------------------


def test_initial_roles_created_by_super_user():
    registry = build_registry()
    clock = TickClock()
    store = MemoryStore(registry=registry, clock=clock)
    roles = [
        get_or_create_role(store, SUPER_USER, schema, name)
        for schema, name in (("Patient", "Patient"), ("Individual", "PatientSon"), ("Medic", "Cardiologist"))
    ]
    for role in roles:
        assert role.backing.version == 1
        origin = store.get_record(role.backing).origin
        assert origin.role == "SuperUserAdmin"
    # one clock reading per creating transaction, in order
    assert [store.get_record(r.backing).origin.timestamp for r in roles] == clock.readings
    assert clock.readings[0] == START

    again = get_or_create_role(store, SUPER_USER, "Patient", "Patient")
    assert again == roles[0]
    assert len(store.history("Patient")) == 1


def test_role_creation_errors():
    store = MemoryStore(registry=hospital_registry(), clock=TickClock())
    with pytest.raises(SchemaNotRole):
        get_or_create_role(store, SUPER_USER, "Counter", "c")
    get_or_create_role(store, SUPER_USER, "Individual", "Someone")
    with pytest.raises(UnknownSchema):
        get_or_create_role(store, SUPER_USER, "HospitalService", "Someone")


def test_super_user_has_no_backing():
    assert SUPER_USER.backing is None and SUPER_USER.role_id
    assert ROLE_ENTITY.is_role
