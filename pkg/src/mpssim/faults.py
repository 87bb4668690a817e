"""Fault taxonomy, classification rules, injection triggers, reachability audit.

Nineteen numbered scenarios exist: fourteen translation-fault combinations
(four base conditions crossed with the SM, CE, and PBDMA engines, with access
mismatch splitting into three variants on the SM side) plus five SM execution
exceptions. Five of the fourteen combinations are architecturally unreachable
from user programs; the dispatch gates below are the model of why.

Classification is a pure function of (seed, memory view): the same access
against the same state always yields the same scenario.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import ApiRejected, AuditViolation, UnreachableTrigger
from .execmodel import EngineClass
from .kernel import PAGE_SIZE
from .memory import (
    AccessType,
    Lifecycle,
    MemoryModel,
    Protection,
    RangeKind,
    Residency,
)


@dataclass(frozen=True)
class ScenarioInfo:
    sid: str                 # stable external name
    num: Optional[int]       # taxonomy row number, None for unnumbered rows
    title: str
    engine: Optional[EngineClass]
    replayable: Optional[bool]
    fatality_stage: str      # "parse-time" | "deferred" | "benign" | "trap"
    serviceable: bool
    propagates: str          # "yes" | "contained" | "no" | "n/a"
    reachability: str        # "user" | "ioctl" | "normal" | "unreachable" | "privileged"
    mechanism: Optional[str]  # dummy-page redirection path, where one applies


def _mmu(sid, num, title, engine, reach, prop, mech):
    return ScenarioInfo(
        sid=sid, num=num, title=title, engine=engine,
        replayable=(engine is EngineClass.SM),
        fatality_stage="deferred", serviceable=False,
        propagates=prop, reachability=reach, mechanism=mech,
    )


def _benign(sid, title, engine):
    return ScenarioInfo(
        sid=sid, num=None, title=title, engine=engine,
        replayable=(engine is EngineClass.SM),
        fatality_stage="benign", serviceable=True,
        propagates="no", reachability="normal", mechanism=None,
    )


def _trap(sid, title):
    return ScenarioInfo(
        sid=sid, num=None, title=title, engine=EngineClass.SM,
        replayable=None, fatality_stage="trap", serviceable=False,
        propagates="yes", reachability="user", mechanism=None,
    )


def _parse_fatal(sid, title):
    return ScenarioInfo(
        sid=sid, num=None, title=title, engine=None,
        replayable=None, fatality_stage="parse-time", serviceable=False,
        propagates="yes", reachability="privileged", mechanism=None,
    )


_SCENARIO_LIST = [
    _mmu("mmu.oob.sm", 1, "Out-of-bounds access", EngineClass.SM, "user", "yes", "M1"),
    _mmu("mmu.am_cpu.sm", 2, "Access mismatch (CPU-resident)", EngineClass.SM, "user", "yes", "M2"),
    _mmu("mmu.am_gpu.sm", 3, "Access mismatch (GPU-resident)", EngineClass.SM, "user", "yes", "M2"),
    _mmu("mmu.am_vmm.sm", 4, "Access mismatch (VMM memory)", EngineClass.SM, "user", "yes", "M3"),
    _mmu("mmu.zombie.sm", 5, "Zombie range access", EngineClass.SM, "ioctl", "yes", "M2"),
    _mmu("mmu.nonmigratable.sm", 6, "Non-migratable range access", EngineClass.SM, "ioctl", "yes", "M2"),
    _mmu("mmu.oob.ce", 7, "Out-of-bounds access", EngineClass.CE, "user", "contained", "M1"),
    _mmu("mmu.am.ce", 8, "Access mismatch", EngineClass.CE, "user", "contained", "M2"),
    _mmu("mmu.zombie.ce", 9, "Zombie range access", EngineClass.CE, "unreachable", "n/a", None),
    _mmu("mmu.nonmigratable.ce", 10, "Non-migratable range access", EngineClass.CE, "unreachable", "n/a", None),
    _mmu("mmu.oob.pbdma", 11, "Out-of-bounds access", EngineClass.PBDMA, "user", "yes", "M1"),
    _mmu("mmu.am.pbdma", 12, "Access mismatch", EngineClass.PBDMA, "unreachable", "n/a", None),
    _mmu("mmu.zombie.pbdma", 13, "Zombie range access", EngineClass.PBDMA, "unreachable", "n/a", None),
    _mmu("mmu.nonmigratable.pbdma", 14, "Non-migratable range access", EngineClass.PBDMA, "unreachable", "n/a", None),
    _benign("benign.demand_paging.sm", "Page fault (demand paging)", EngineClass.SM),
    _benign("benign.invalid_prefetch.sm", "Invalid prefetch", EngineClass.SM),
    _benign("benign.page_fault.ce", "Page fault", EngineClass.CE),
    _benign("benign.page_fault.pbdma", "Page fault", EngineClass.PBDMA),
    _trap("sm.exc2.lane_user_stack_overflow", "Lane user stack overflow (EXC_2)"),
    _trap("sm.exc4.illegal_instruction", "Illegal instruction (EXC_4)"),
    _trap("sm.exc5.shared_local_oob", "Shared/local OOB (EXC_5)"),
    _trap("sm.exc6.misaligned_address", "Misaligned address (EXC_6)"),
    _trap("sm.exc7.invalid_address_space", "Invalid address space (EXC_7)"),
    _parse_fatal("parse.mmu_structural", "MMU structural corruption"),
    _parse_fatal("parse.channel_state", "Context/channel state corruption"),
    _parse_fatal("parse.privilege", "Privilege/security violation"),
    _parse_fatal("parse.aperture", "Memory attribute/aperture mismatch"),
    _parse_fatal("parse.ecc_poison", "Hardware data corruption"),
]

SCENARIOS: dict[str, ScenarioInfo] = {s.sid: s for s in _SCENARIO_LIST}
SCENARIOS_BY_NUM: dict[int, ScenarioInfo] = {
    s.num: s for s in _SCENARIO_LIST if s.num is not None
}
UNREACHABLE_NUMS = frozenset({9, 10, 12, 13, 14})

EXCEPTION_CODES = {
    "EXC_2": "sm.exc2.lane_user_stack_overflow",
    "EXC_4": "sm.exc4.illegal_instruction",
    "EXC_5": "sm.exc5.shared_local_oob",
    "EXC_6": "sm.exc6.misaligned_address",
    "EXC_7": "sm.exc7.invalid_address_space",
}


# -- classification ----------------------------------------------------------

_ENGINE_SUFFIX = {
    EngineClass.SM: "sm",
    EngineClass.CE: "ce",
    EngineClass.PBDMA: "pbdma",
}


def classify(seed, mem: MemoryModel, pid: str) -> ScenarioInfo:
    """Map one translation-fault seed to its scenario.

    Condition priority mirrors the servicing order: no range at all beats any
    per-page state, a dead backing beats a pinned one, and a pinned page beats
    a plain permission mismatch.
    """
    engine = seed.engine
    suffix = _ENGINE_SUFFIX[engine]
    rng = mem.range_at(pid, seed.va)

    if seed.access is AccessType.PREFETCH:
        return SCENARIOS["benign.invalid_prefetch.sm"]
    if rng is None:
        return SCENARIOS[f"mmu.oob.{suffix}"]
    if rng.lifecycle is Lifecycle.ZOMBIE:
        return SCENARIOS[f"mmu.zombie.{suffix}"]
    rec = rng.pages[rng.page_index(seed.va)]
    if not rng.migratable and rec.residency is Residency.CPU:
        return SCENARIOS[f"mmu.nonmigratable.{suffix}"]
    if seed.access is AccessType.WRITE and rec.protection is Protection.READ_ONLY:
        if engine is EngineClass.SM:
            if rng.kind is RangeKind.EXTERNAL:
                return SCENARIOS["mmu.am_vmm.sm"]
            if rec.residency is Residency.GPU:
                return SCENARIOS["mmu.am_gpu.sm"]
            return SCENARIOS["mmu.am_cpu.sm"]
        return SCENARIOS[f"mmu.am.{suffix}"]
    if rng.kind is RangeKind.MANAGED and rec.residency in (
        Residency.UNPOPULATED,
        Residency.CPU,
    ):
        if engine is EngineClass.SM:
            return SCENARIOS["benign.demand_paging.sm"]
        return SCENARIOS[f"benign.page_fault.{suffix}"]
    # External pages are populated at creation; a miss that reaches this point
    # has no range state left to explain it, so treat it as out of bounds.
    return SCENARIOS[f"mmu.oob.{suffix}"]


# -- dispatch gates -----------------------------------------------------------


class DispatchGates:
    """API-layer validation that keeps gray-cell combinations unreachable.

    The copy path refuses managed ranges whose lifecycle left normal user
    control (zombie, pinned); user operations on such state are re-dispatched
    as SM work. The semaphore-wait path refuses any user-owned address, so
    the only address a wait can fault on is an invalid pool offset.
    """

    def __init__(self, ce_managed_state_gate=True, pbdma_user_va_gate=True):
        self.ce_managed_state_gate = ce_managed_state_gate
        self.pbdma_user_va_gate = pbdma_user_va_gate

    def check_ce(self, mem: MemoryModel, pid: str, va: int):
        if not self.ce_managed_state_gate:
            return
        rng = mem.range_at(pid, va)
        if rng is None or rng.kind is not RangeKind.MANAGED:
            return
        if rng.lifecycle is Lifecycle.ZOMBIE:
            raise ApiRejected("copy target was deallocated")
        if not rng.migratable:
            raise ApiRejected("copy target is pinned outside device memory")

    def check_pbdma(self, mem: MemoryModel, pid: str, va: int):
        if not self.pbdma_user_va_gate:
            return
        rng = mem.range_at(pid, va)
        if rng is not None and not rng.semaphore_pool:
            raise ApiRejected("semaphore wait must not target user memory")


# -- injection triggers -------------------------------------------------------

@dataclass(frozen=True)
class TriggerSpec:
    name: str
    engine: EngineClass
    expected_scenario: str
    reachability: str  # "user" | "ioctl"
    description: str


TRIGGERS: dict[str, TriggerSpec] = {
    t.name: t
    for t in [
        TriggerSpec("mmu.oob.sm", EngineClass.SM, "mmu.oob.sm", "user",
                    "device alloc, then kernel write past the end"),
        TriggerSpec("mmu.am_cpu.sm", EngineClass.SM, "mmu.am_cpu.sm", "user",
                    "managed alloc advised read-only, then kernel write"),
        TriggerSpec("mmu.am_gpu.sm", EngineClass.SM, "mmu.am_gpu.sm", "user",
                    "managed alloc migrated to GPU, advised read-only, then kernel write"),
        TriggerSpec("mmu.am_vmm.sm", EngineClass.SM, "mmu.am_vmm.sm", "user",
                    "VMM alloc mapped read-only, then kernel write"),
        TriggerSpec("mmu.zombie.sm", EngineClass.SM, "mmu.zombie.sm", "ioctl",
                    "debug ioctl de-registers backing, then kernel access"),
        TriggerSpec("mmu.nonmigratable.sm", EngineClass.SM, "mmu.nonmigratable.sm", "ioctl",
                    "debug ioctl pins range to host, then kernel access"),
        TriggerSpec("mmu.oob.ce", EngineClass.CE, "mmu.oob.ce", "user",
                    "device alloc, then copy past the end"),
        TriggerSpec("mmu.am.ce", EngineClass.CE, "mmu.am.ce", "user",
                    "managed alloc advised read-only, then copy write"),
        TriggerSpec("mmu.oob.pbdma", EngineClass.PBDMA, "mmu.oob.pbdma", "user",
                    "semaphore wait on an unmapped address"),
        TriggerSpec("mmu.zombie.ce", EngineClass.CE, "mmu.zombie.ce", "unreachable",
                    "copy into a zombie range (rejected at the API layer)"),
        TriggerSpec("mmu.nonmigratable.ce", EngineClass.CE, "mmu.nonmigratable.ce", "unreachable",
                    "copy into a pinned range (rejected at the API layer)"),
        TriggerSpec("mmu.am.pbdma", EngineClass.PBDMA, "mmu.am.pbdma", "unreachable",
                    "semaphore wait on user memory (rejected at the API layer)"),
        TriggerSpec("mmu.zombie.pbdma", EngineClass.PBDMA, "mmu.zombie.pbdma", "unreachable",
                    "semaphore wait on a zombie range (rejected at the API layer)"),
        TriggerSpec("mmu.nonmigratable.pbdma", EngineClass.PBDMA, "mmu.nonmigratable.pbdma", "unreachable",
                    "semaphore wait on a pinned range (rejected at the API layer)"),
        TriggerSpec("benign.demand_paging.sm", EngineClass.SM, "benign.demand_paging.sm", "user",
                    "managed alloc, then first-touch kernel read"),
        TriggerSpec("benign.invalid_prefetch.sm", EngineClass.SM, "benign.invalid_prefetch.sm", "user",
                    "prefetch of an address outside any managed range"),
        TriggerSpec("benign.page_fault.ce", EngineClass.CE, "benign.page_fault.ce", "user",
                    "managed alloc, then first-touch copy"),
        TriggerSpec("benign.page_fault.pbdma", EngineClass.PBDMA, "benign.page_fault.pbdma", "user",
                    "semaphore wait on an unpopulated pool page"),
        TriggerSpec("sm.exc2.lane_user_stack_overflow", EngineClass.SM,
                    "sm.exc2.lane_user_stack_overflow", "user",
                    "deep recursion against a tiny stack limit"),
        TriggerSpec("sm.exc4.illegal_instruction", EngineClass.SM,
                    "sm.exc4.illegal_instruction", "user",
                    "kernel binary patched with an invalid opcode"),
        TriggerSpec("sm.exc5.shared_local_oob", EngineClass.SM,
                    "sm.exc5.shared_local_oob", "user",
                    "shared/local load outside the window"),
        TriggerSpec("sm.exc6.misaligned_address", EngineClass.SM,
                    "sm.exc6.misaligned_address", "user",
                    "unaligned wide memory access"),
        TriggerSpec("sm.exc7.invalid_address_space", EngineClass.SM,
                    "sm.exc7.invalid_address_space", "user",
                    "global atomic on a shared-space address"),
    ]
}

MMU_TRIGGER_ORDER = [
    "mmu.oob.sm", "mmu.am_cpu.sm", "mmu.am_gpu.sm", "mmu.am_vmm.sm",
    "mmu.zombie.sm", "mmu.nonmigratable.sm", "mmu.oob.ce", "mmu.am.ce",
    "mmu.oob.pbdma",
]
SM_TRIGGER_ORDER = [
    "sm.exc2.lane_user_stack_overflow",
    "sm.exc4.illegal_instruction",
    "sm.exc5.shared_local_oob",
    "sm.exc6.misaligned_address",
    "sm.exc7.invalid_address_space",
]
PARSE_TIME_ORDER = [
    "parse.mmu_structural", "parse.channel_state", "parse.privilege",
    "parse.aperture", "parse.ecc_poison",
]


def inject(world, pid: str, trigger: str, privileged: bool = False):
    """Run one trigger recipe for `pid`: allocations plus the faulting command.

    Unreachable combinations raise UnreachableTrigger at this layer; the
    separate privileged flag admits parse-time fault injection, which no user
    recipe can produce.
    """
    if trigger in PARSE_TIME_ORDER:
        if not privileged:
            raise UnreachableTrigger(
                f"{trigger} requires privileged parse-time injection"
            )
        ch = world.gpu.client_channel(pid, EngineClass.SM)
        world.gpu.enqueue(world, ch.id, "parse_fault", category=trigger)
        world.trace.emit(world.clock.now, pid, "inject", trigger=trigger)
        return {"trigger": trigger, "expected": trigger}

    spec = TRIGGERS.get(trigger)
    if spec is None:
        raise UnreachableTrigger(f"unknown trigger {trigger}")
    if spec.reachability == "unreachable":
        raise UnreachableTrigger(
            f"{trigger} cannot be produced from the user-level API"
        )

    mem = world.mem
    gpu = world.gpu
    world.trace.emit(world.clock.now, pid, "inject", trigger=trigger)

    def sm_cmd(kind, **args):
        ch = gpu.client_channel(pid, EngineClass.SM)
        gpu.enqueue(world, ch.id, kind, **args)

    def ce_cmd(va):
        world.gates.check_ce(mem, pid, va)
        ch = gpu.client_channel(pid, EngineClass.CE)
        gpu.enqueue(world, ch.id, "copy", va=va, access=AccessType.WRITE.value)

    def pbdma_cmd(va):
        world.gates.check_pbdma(mem, pid, va)
        ch = gpu.client_channel(pid, EngineClass.PBDMA)
        gpu.enqueue(world, ch.id, "sem_wait", va=va)

    if trigger == "mmu.oob.sm":
        rng = mem.alloc_device(world, pid, 2 * PAGE_SIZE)
        sm_cmd("access", va=rng.end, access=AccessType.WRITE.value)
    elif trigger == "mmu.am_cpu.sm":
        rng = mem.alloc_managed(world, pid, PAGE_SIZE)
        mem.set_access(world, rng, Protection.READ_ONLY)
        sm_cmd("access", va=rng.base, access=AccessType.WRITE.value)
    elif trigger == "mmu.am_gpu.sm":
        rng = mem.alloc_managed(world, pid, PAGE_SIZE)
        mem.populate_page(world, rng, 0)
        mem.set_access(world, rng, Protection.READ_ONLY)
        sm_cmd("access", va=rng.base, access=AccessType.WRITE.value)
    elif trigger == "mmu.am_vmm.sm":
        _handle, rng = mem.vmm_create_map(world, pid, PAGE_SIZE)
        mem.set_access(world, rng, Protection.READ_ONLY)
        sm_cmd("access", va=rng.base, access=AccessType.WRITE.value)
    elif trigger == "mmu.zombie.sm":
        rng = mem.alloc_managed(world, pid, PAGE_SIZE)
        mem.populate_page(world, rng, 0)
        mem.make_zombie(world, rng)
        sm_cmd("access", va=rng.base, access=AccessType.READ.value)
    elif trigger == "mmu.nonmigratable.sm":
        rng = mem.alloc_managed(world, pid, PAGE_SIZE)
        mem.pin_non_migratable(world, rng)
        sm_cmd("access", va=rng.base, access=AccessType.READ.value)
    elif trigger == "mmu.oob.ce":
        rng = mem.alloc_device(world, pid, PAGE_SIZE)
        ce_cmd(rng.end)
    elif trigger == "mmu.am.ce":
        rng = mem.alloc_managed(world, pid, PAGE_SIZE)
        mem.set_access(world, rng, Protection.READ_ONLY)
        ce_cmd(rng.base)
    elif trigger == "mmu.oob.pbdma":
        pbdma_cmd(0xDEAD_0000)
    elif trigger == "benign.demand_paging.sm":
        rng = mem.alloc_managed(world, pid, PAGE_SIZE)
        sm_cmd("access", va=rng.base, access=AccessType.READ.value)
    elif trigger == "benign.invalid_prefetch.sm":
        sm_cmd("access", va=0xBEEF_0000, access=AccessType.PREFETCH.value)
    elif trigger == "benign.page_fault.ce":
        rng = mem.alloc_managed(world, pid, PAGE_SIZE)
        ce_cmd(rng.base)
    elif trigger == "benign.page_fault.pbdma":
        pool = mem.semaphore_pool_for(world, pid)
        pbdma_cmd(pool.base)
    elif trigger in SM_TRIGGER_ORDER:
        code = trigger.split(".")[1].upper().replace("EXC", "EXC_")
        sm_cmd("exception", code=code)
    else:
        raise UnreachableTrigger(f"no recipe for {trigger}")
    return {"trigger": trigger, "expected": spec.expected_scenario}


# -- reachability audit -------------------------------------------------------

# Micro-operations the user-level injection surface is built from. A sequence
# of these, bounded in length, is executed against a fresh world holding one
# device range (D), one managed range (M), and one VMM-mapped range (V).
AUDIT_OPS = [
    "advise_ro_m",       # read-only policy on M (user API)
    "migrate_m",         # kernel read of M, migrates it to GPU (user API)
    "set_access_ro_v",   # read-only mapping on V (user API)
    "zombie_m",          # debug ioctl: de-register M's backing
    "pin_m",             # debug ioctl: pin M to host memory
    "sm_write_m",
    "sm_read_m",
    "sm_write_v",
    "sm_write_oob",      # write one byte past D
    "sm_prefetch_bad",
    "ce_write_m",
    "ce_read_m",
    "ce_write_v",
    "ce_write_oob",
    "pbdma_wait_unmapped",
    "pbdma_wait_m",
    "pbdma_wait_pool",
]

IOCTL_OPS = frozenset({"zombie_m", "pin_m"})


@dataclass
class AuditReport:
    depth: int
    sequences_run: int
    observed: dict              # scenario sid -> first witnessing sequence
    violations: list            # (sequence, scenario sid)
    ioctl_only: dict            # sid -> True if every witness used an ioctl op

    def summary(self) -> str:
        lines = [
            f"audit depth={self.depth} sequences={self.sequences_run} "
            f"violations={len(self.violations)}"
        ]
        for sid in sorted(self.observed):
            tag = "ioctl" if self.ioctl_only.get(sid) else "user"
            lines.append(f"  observed {sid} via {tag}: {'+'.join(self.observed[sid])}")
        for seq, sid in self.violations:
            lines.append(f"  VIOLATION {sid} via {'+'.join(seq)}")
        return "\n".join(lines) + "\n"


def _audit_world(params, gates):
    # Imported here: the machine module wires every subsystem together and
    # importing it at module scope would be circular.
    from . import machine

    world = machine.build_world(params)
    world.gates = gates if gates is not None else DispatchGates()
    world.uvm.isolation_enabled = False
    client = machine.create_client(world, "standalone")
    mem = world.mem
    pid = client.pid
    targets = {
        "D": mem.alloc_device(world, pid, PAGE_SIZE),
        "M": mem.alloc_managed(world, pid, PAGE_SIZE),
        "V": mem.vmm_create_map(world, pid, PAGE_SIZE)[1],
    }
    return world, client, targets


def _apply_audit_op(world, client, targets, op) -> bool:
    """Run one micro-op; returns False if the client can no longer execute."""
    from .execmodel import ClientState

    if client.state is not ClientState.RUNNING:
        return False
    mem, gpu, pid = world.mem, world.gpu, client.pid
    M, V, D = targets["M"], targets["V"], targets["D"]

    def run_cmd(engine, kind, **args):
        ch = gpu.client_channel(pid, engine)
        gpu.enqueue(world, ch.id, kind, **args)
        world.run_until_quiescent()

    try:
        if op == "advise_ro_m":
            mem.set_access(world, M, Protection.READ_ONLY)
        elif op == "migrate_m":
            run_cmd(EngineClass.SM, "access", va=M.base, access="read")
        elif op == "set_access_ro_v":
            mem.set_access(world, V, Protection.READ_ONLY)
        elif op == "zombie_m":
            if M.lifecycle is Lifecycle.LIVE:
                mem.make_zombie(world, M)
        elif op == "pin_m":
            if M.lifecycle is Lifecycle.LIVE:
                mem.pin_non_migratable(world, M)
        elif op == "sm_write_m":
            run_cmd(EngineClass.SM, "access", va=M.base, access="write")
        elif op == "sm_read_m":
            run_cmd(EngineClass.SM, "access", va=M.base, access="read")
        elif op == "sm_write_v":
            run_cmd(EngineClass.SM, "access", va=V.base, access="write")
        elif op == "sm_write_oob":
            run_cmd(EngineClass.SM, "access", va=D.end, access="write")
        elif op == "sm_prefetch_bad":
            run_cmd(EngineClass.SM, "access", va=0xBEEF_0000, access="prefetch")
        elif op == "ce_write_m":
            world.gates.check_ce(mem, pid, M.base)
            run_cmd(EngineClass.CE, "copy", va=M.base, access="write")
        elif op == "ce_read_m":
            world.gates.check_ce(mem, pid, M.base)
            run_cmd(EngineClass.CE, "copy", va=M.base, access="read")
        elif op == "ce_write_v":
            world.gates.check_ce(mem, pid, V.base)
            run_cmd(EngineClass.CE, "copy", va=V.base, access="write")
        elif op == "ce_write_oob":
            world.gates.check_ce(mem, pid, D.end)
            run_cmd(EngineClass.CE, "copy", va=D.end, access="write")
        elif op == "pbdma_wait_unmapped":
            world.gates.check_pbdma(mem, pid, 0xDEAD_0000)
            run_cmd(EngineClass.PBDMA, "sem_wait", va=0xDEAD_0000)
        elif op == "pbdma_wait_m":
            world.gates.check_pbdma(mem, pid, M.base)
            run_cmd(EngineClass.PBDMA, "sem_wait", va=M.base)
        elif op == "pbdma_wait_pool":
            pool = mem.semaphore_pool_for(world, pid)
            world.gates.check_pbdma(mem, pid, pool.base)
            run_cmd(EngineClass.PBDMA, "sem_wait", va=pool.base)
        else:
            raise ValueError(f"unknown audit op {op}")
    except ApiRejected:
        world.trace.emit(world.clock.now, pid, "api_rejected", op=op)
    return True


def reachability_audit(params=None, depth: int = 3, gates=None) -> AuditReport:
    """Enumerate every micro-op sequence up to `depth`; fail on gray cells.

    Each sequence runs in a fresh world so state never leaks between cases.
    Raises AuditViolation (report attached) if any sequence produces a
    scenario the taxonomy marks unreachable.
    """
    from itertools import product

    from .kernel import SimParams

    if params is None:
        params = SimParams(gpu_pages=4096)
    observed: dict[str, tuple] = {}
    ioctl_only: dict[str, bool] = {}
    violations: list = []
    sequences_run = 0

    for length in range(1, depth + 1):
        for seq in product(AUDIT_OPS, repeat=length):
            # Sequences that never touch the GPU cannot fault; skip the pure
            # setup tuples to keep the sweep budget on meaningful cases.
            if not any(op.startswith(("sm_", "ce_", "pbdma_")) for op in seq):
                continue
            sequences_run += 1
            world, client, targets = _audit_world(params, gates)
            for op in seq:
                if not _apply_audit_op(world, client, targets, op):
                    break
            used_ioctl = any(op in IOCTL_OPS for op in seq)
            for rec in world.uvm.fault_log:
                sid = rec.scenario
                info = SCENARIOS[sid]
                if sid not in observed:
                    observed[sid] = seq
                    ioctl_only[sid] = used_ioctl
                elif not used_ioctl:
                    ioctl_only[sid] = False
                if info.num in UNREACHABLE_NUMS:
                    violations.append((seq, sid))

    report = AuditReport(
        depth=depth, sequences_run=sequences_run, observed=observed,
        violations=violations, ioctl_only=ioctl_only,
    )
    if violations:
        seq, sid = violations[0]
        raise AuditViolation(
            f"sequence {'+'.join(seq)} produced unreachable scenario {sid}",
            report=report,
        )
    return report
