"""Taxonomy, classification, injection triggers, reachability audit."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpssim import faults, machine
from mpssim.errors import AuditViolation, UnreachableTrigger
from mpssim.execmodel import EngineClass
from mpssim.kernel import PAGE_SIZE, SimParams
from mpssim.memory import AccessType, FaultSeed, Protection

# Expected verdict rows for every numbered scenario:
# (replayable, reachability, propagates, mechanism)
TAXONOMY = {
    1: (True, "user", "yes", "M1"),
    2: (True, "user", "yes", "M2"),
    3: (True, "user", "yes", "M2"),
    4: (True, "user", "yes", "M3"),
    5: (True, "ioctl", "yes", "M2"),
    6: (True, "ioctl", "yes", "M2"),
    7: (False, "user", "contained", "M1"),
    8: (False, "user", "contained", "M2"),
    9: (False, "unreachable", "n/a", None),
    10: (False, "unreachable", "n/a", None),
    11: (False, "user", "yes", "M1"),
    12: (False, "unreachable", "n/a", None),
    13: (False, "unreachable", "n/a", None),
    14: (False, "unreachable", "n/a", None),
}


def test_scenario_table_matches_the_taxonomy():
    assert set(faults.SCENARIOS_BY_NUM) == set(range(1, 15))
    for num, (replayable, reach, prop, mech) in TAXONOMY.items():
        info = faults.SCENARIOS_BY_NUM[num]
        assert info.replayable == replayable, info.sid
        assert info.reachability == reach, info.sid
        assert info.propagates == prop, info.sid
        assert info.mechanism == mech, info.sid
        assert info.fatality_stage == "deferred", info.sid
        assert not info.serviceable, info.sid


def test_gray_cells_are_exactly_the_five_unreachable_numbers():
    unreachable = {n for n, info in faults.SCENARIOS_BY_NUM.items()
                   if info.reachability == "unreachable"}
    assert unreachable == {9, 10, 12, 13, 14}
    assert unreachable == set(faults.UNREACHABLE_NUMS)


def test_exactly_five_exception_codes():
    assert len(faults.EXCEPTION_CODES) == 5
    assert set(faults.EXCEPTION_CODES) == {"EXC_2", "EXC_4", "EXC_5", "EXC_6",
                                           "EXC_7"}
    for sid in faults.EXCEPTION_CODES.values():
        info = faults.SCENARIOS[sid]
        assert info.propagates == "yes"
        assert info.fatality_stage == "trap"


def test_benign_rows_are_serviceable_and_do_not_propagate():
    for sid in ("benign.demand_paging.sm", "benign.invalid_prefetch.sm",
                "benign.page_fault.ce", "benign.page_fault.pbdma"):
        info = faults.SCENARIOS[sid]
        assert info.serviceable
        assert info.propagates == "no"


def test_parse_time_categories():
    cats = [faults.SCENARIOS[sid] for sid in faults.PARSE_TIME_ORDER]
    assert len(cats) == 5
    assert all(c.fatality_stage == "parse-time" for c in cats)
    assert all(not c.serviceable for c in cats)


# -- classification ------------------------------------------------------------

def classify_world():
    w = machine.build_world(SimParams(per_process_overhead_pages=0))
    pid = machine.create_client(w, "standalone").pid
    return w, pid


def seed(va, access, engine):
    return FaultSeed(va=va, access=access, engine=engine)


def test_classify_sm_write_past_device_allocation_is_scenario_1():
    w, pid = classify_world()
    rng = w.mem.alloc_device(w, pid, PAGE_SIZE)
    info = faults.classify(seed(rng.end, AccessType.WRITE, EngineClass.SM),
                           w.mem, pid)
    assert info.num == 1
    assert info.replayable and info.fatality_stage == "deferred"
    assert not info.serviceable and info.propagates == "yes"


def test_classify_ce_write_to_read_only_managed_is_scenario_8():
    w, pid = classify_world()
    rng = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    w.mem.set_access(w, rng, Protection.READ_ONLY)
    info = faults.classify(seed(rng.base, AccessType.WRITE, EngineClass.CE),
                           w.mem, pid)
    assert info.num == 8
    assert not info.replayable
    assert info.propagates == "contained"


def test_classify_first_touch_is_benign_demand_paging():
    w, pid = classify_world()
    rng = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    info = faults.classify(seed(rng.base, AccessType.READ, EngineClass.SM),
                           w.mem, pid)
    assert info.sid == "benign.demand_paging.sm"
    assert info.serviceable


def test_classify_am_variants_split_on_residency_and_kind():
    w, pid = classify_world()
    m = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    w.mem.set_access(w, m, Protection.READ_ONLY)
    assert faults.classify(seed(m.base, AccessType.WRITE, EngineClass.SM),
                           w.mem, pid).num == 2
    w.mem.populate_page(w, m, 0)
    assert faults.classify(seed(m.base, AccessType.WRITE, EngineClass.SM),
                           w.mem, pid).num == 3
    _, v = w.mem.vmm_create_map(w, pid, PAGE_SIZE)
    w.mem.set_access(w, v, Protection.READ_ONLY)
    assert faults.classify(seed(v.base, AccessType.WRITE, EngineClass.SM),
                           w.mem, pid).num == 4


def test_classification_is_pure():
    w, pid = classify_world()
    rng = w.mem.alloc_device(w, pid, PAGE_SIZE)
    s = seed(rng.end, AccessType.WRITE, EngineClass.CE)
    assert faults.classify(s, w.mem, pid) is faults.classify(s, w.mem, pid)


@settings(max_examples=200, deadline=None)
@given(
    prep=st.sampled_from(["none", "ro", "migrate_ro", "zombie", "pin"]),
    engine=st.sampled_from(list(EngineClass)),
    access=st.sampled_from([AccessType.READ, AccessType.WRITE]),
    off_range=st.booleans(),
)
def test_classify_verdict_shape_property(prep, engine, access, off_range):
    """Whatever the state, classification lands on one scenario whose verdicts
    are internally consistent and whose engine matches the seed's."""
    w, pid = classify_world()
    rng = w.mem.alloc_managed(w, pid, PAGE_SIZE)
    if prep == "ro":
        w.mem.set_access(w, rng, Protection.READ_ONLY)
    elif prep == "migrate_ro":
        w.mem.populate_page(w, rng, 0)
        w.mem.set_access(w, rng, Protection.READ_ONLY)
    elif prep == "zombie":
        w.mem.make_zombie(w, rng)
    elif prep == "pin":
        w.mem.pin_non_migratable(w, rng)
    va = rng.end if off_range else rng.base
    info = faults.classify(seed(va, access, engine), w.mem, pid)
    again = faults.classify(seed(va, access, engine), w.mem, pid)
    assert info is again
    assert info.engine == engine
    assert info.replayable == (engine is EngineClass.SM)
    assert info.serviceable == info.sid.startswith("benign.")
    if info.serviceable:
        assert info.propagates == "no"


# -- injection -----------------------------------------------------------------

def run_trigger(trigger):
    w = machine.build_world(SimParams(per_process_overhead_pages=0))
    pid = machine.create_client(w, "standalone").pid
    w.uvm.isolation_enabled = False
    faults.inject(w, pid, trigger)
    w.run_until_quiescent()
    return w


@pytest.mark.parametrize("trigger", faults.MMU_TRIGGER_ORDER)
def test_each_mmu_trigger_produces_its_scenario(trigger):
    w = run_trigger(trigger)
    assert [r.scenario for r in w.uvm.fault_log] == [trigger]


def test_pbdma_oob_trigger_is_scenario_11():
    w = run_trigger("mmu.oob.pbdma")
    rec = w.uvm.fault_log[0]
    assert faults.SCENARIOS[rec.scenario].num == 11
    assert rec.channel_id.endswith(".pbdma")


def test_sm_exception_trigger_reaches_the_firmware_as_a_trap():
    w = run_trigger("sm.exc4.illegal_instruction")
    assert w.rmgsp.traps == [("EXC_4", 0)]
    assert w.uvm.fault_log == []  # no translation-fault packet for traps


@pytest.mark.parametrize("trigger", [
    "mmu.zombie.ce", "mmu.nonmigratable.ce", "mmu.am.pbdma",
    "mmu.zombie.pbdma", "mmu.nonmigratable.pbdma",
])
def test_unreachable_triggers_are_rejected_at_the_api(trigger):
    w = machine.build_world(SimParams(per_process_overhead_pages=0))
    pid = machine.create_client(w, "standalone").pid
    with pytest.raises(UnreachableTrigger):
        faults.inject(w, pid, trigger)


def test_parse_time_injection_requires_the_privileged_flag():
    w = machine.build_world(SimParams(per_process_overhead_pages=0))
    pid = machine.create_client(w, "standalone").pid
    with pytest.raises(UnreachableTrigger):
        faults.inject(w, pid, "parse.ecc_poison")
    faults.inject(w, pid, "parse.ecc_poison", privileged=True)
    w.run_until_quiescent()
    assert [r.scenario for r in w.uvm.fault_log] == ["parse.ecc_poison"]


def test_benign_triggers_resolve_without_fatality():
    for trigger in ("benign.demand_paging.sm", "benign.invalid_prefetch.sm",
                    "benign.page_fault.ce", "benign.page_fault.pbdma"):
        w = run_trigger(trigger)
        assert w.rmgsp.fatal_reports == [], trigger
        assert "kind=benign_serviced" in w.trace.render(), trigger


# -- reachability audit ----------------------------------------------------------

def test_depth_zero_audit_is_vacuously_clean():
    report = faults.reachability_audit(depth=0)
    assert report.sequences_run == 0
    assert report.violations == []


def test_depth_two_audit_observes_only_reachable_scenarios():
    report = faults.reachability_audit(depth=2)
    nums = {faults.SCENARIOS[sid].num for sid in report.observed
            if faults.SCENARIOS[sid].num is not None}
    assert nums & faults.UNREACHABLE_NUMS == set()
    # Zombie and pinned-range scenarios exist only behind the debug ioctls.
    assert report.ioctl_only.get("mmu.zombie.sm") is True
    assert report.ioctl_only.get("mmu.nonmigratable.sm") is True
    assert report.ioctl_only.get("mmu.oob.sm") is False


def test_broken_copy_gate_is_caught_by_the_audit():
    gates = faults.DispatchGates(ce_managed_state_gate=False)
    with pytest.raises(AuditViolation) as exc:
        faults.reachability_audit(depth=2, gates=gates)
    report = exc.value.report
    sids = {sid for _, sid in report.violations}
    assert "mmu.zombie.ce" in sids  # the copy path reached a zombie range
    witness = [seq for seq, sid in report.violations if sid == "mmu.zombie.ce"][0]
    assert "zombie_m" in witness and "ce_write_m" in witness


def test_broken_semaphore_gate_is_caught_by_the_audit():
    gates = faults.DispatchGates(pbdma_user_va_gate=False)
    with pytest.raises(AuditViolation) as exc:
        faults.reachability_audit(depth=2, gates=gates)
    sids = {sid for _, sid in exc.value.report.violations}
    assert sids & {"mmu.zombie.pbdma", "mmu.nonmigratable.pbdma"}
