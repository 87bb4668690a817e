"""End-to-end fault handling: detection, fatality determination, propagation.

Translation faults arrive through hardware fault buffers and carry the
faulting channel's identity; execution exceptions arrive as a global TRAP with
no channel attribution at all. Replayable faults stall the faulting TSG until
resolution; non-replayable faults switch the TSG out. Faults that cannot be
serviced are reported to the firmware, which performs RC recovery: tearing
down every channel in the affected TSG.

The isolation path hooks the window between classification and the fatal
report. It installs pre-zeroed dummy backing so the fault resolves through the
normal service path, terminates only the faulting client (safe because the
hardware is quiescent inside the window), and never lets the firmware see a
fatal report.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from . import faults as faults_mod
from .errors import NoChannelAttribution, UnknownPid
from .execmodel import ChannelState, ClientState, EngineClass, TsgKind, TsgState
from .kernel import PAGE_SIZE
from .memory import AccessType, RangeKind


@dataclass
class FaultRecord:
    seed: object
    channel_id: Optional[str]
    scenario: str
    replayable: bool
    fatality_stage: str
    serviceable: bool
    propagates: str
    detected_at: int


@dataclass
class FaultBuffer:
    kind: str  # "replayable-direct" | "nonreplayable-shadow"
    queue: deque = field(default_factory=deque)
    get_cursor: int = 0
    put_cursor: int = 0

    def push(self, record: FaultRecord):
        self.queue.append(record)
        self.put_cursor += 1

    def drain(self) -> list[FaultRecord]:
        out = list(self.queue)
        self.queue.clear()
        self.get_cursor = self.put_cursor
        return out


@dataclass
class IsolationOutcome:
    mechanism: str
    terminated_pid: str
    latency_us: int
    scenario: str


class UvmHandler:
    """Driver-side fault servicing plus the optional isolation interception."""

    def __init__(self):
        self.isolation_enabled = True
        self.channel_to_pid: dict[str, str] = {}
        self.replayable_buf = FaultBuffer("replayable-direct")
        self.nonreplayable_buf = FaultBuffer("nonreplayable-shadow")
        self.fault_log: list[FaultRecord] = []
        self.isolation_outcomes: list[IsolationOutcome] = []


class RmGsp:
    """Opaque firmware model: consumes fatal reports and TRAPs, runs RC recovery."""

    def __init__(self):
        self.fatal_reports: list = []
        self.traps: list = []
        self.error_notifier: dict[str, str] = {}  # context id -> last error


def register_client_channels(world, client):
    for ch_id in client.channel_ids.values():
        world.uvm.channel_to_pid[ch_id] = client.pid


# -- detection (top half) -----------------------------------------------------

def raise_mmu_fault(world, seed):
    """Hardware writes a fault packet; the top half queues bottom-half work.

    Replayable faults stall the faulting channel and its TSG siblings;
    non-replayable faults preempt the owning TSG so other TSGs keep running.
    """
    uvm = world.uvm
    pid = uvm.channel_to_pid[seed.channel_id]
    info = faults_mod.classify(seed, world.mem, pid)
    record = FaultRecord(
        seed=seed, channel_id=seed.channel_id, scenario=info.sid,
        replayable=bool(info.replayable), fatality_stage=info.fatality_stage,
        serviceable=info.serviceable, propagates=info.propagates,
        detected_at=world.clock.now,
    )
    uvm.fault_log.append(record)
    ch = world.gpu.channels[seed.channel_id]
    world.trace.emit(world.clock.now, seed.channel_id, "fault_raised",
                     scenario=info.sid, va=seed.va, access=seed.access.value,
                     engine=seed.engine.value)
    if record.replayable:
        uvm.replayable_buf.push(record)
        if world.gpu.tsgs[ch.tsg_id].state is TsgState.ACTIVE:
            world.gpu.stall_tsg(world, ch.tsg_id)
    else:
        # Firmware owns the non-replayable buffer and copies entries into a
        # shadow buffer before the driver sees them.
        uvm.nonreplayable_buf.push(record)
        world.trace.emit(world.clock.now, "rmgsp", "shadow_copy",
                         scenario=info.sid, channel=seed.channel_id)
        if world.gpu.tsgs[ch.tsg_id].state is TsgState.ACTIVE:
            world.gpu.preempt_tsg(world, ch.tsg_id)
    world.schedule(0, "uvm", "bottom_half")
    return record


def raise_parse_time_fault(world, channel_id: str, category: str):
    """Privileged injection of a fault that is fatal at parse time."""
    uvm = world.uvm
    record = FaultRecord(
        seed=None, channel_id=channel_id, scenario=category,
        replayable=True, fatality_stage="parse-time", serviceable=False,
        propagates="yes", detected_at=world.clock.now,
    )
    uvm.fault_log.append(record)
    ch = world.gpu.channels[channel_id]
    world.trace.emit(world.clock.now, channel_id, "fault_raised",
                     scenario=category, va=0, access="n/a", engine="sm")
    uvm.replayable_buf.push(record)
    if world.gpu.tsgs[ch.tsg_id].state is TsgState.ACTIVE:
        world.gpu.stall_tsg(world, ch.tsg_id)
    world.schedule(0, "uvm", "bottom_half")
    return record


def raise_sm_trap(world, code: str, sm_id: int, raiser_pid: str):
    """Execution exception: a global TRAP with no channel attribution."""
    world.rmgsp.traps.append((code, sm_id))
    world.trace.emit(world.clock.now, "rmgsp", "sm_trap", code=code, sm=sm_id)
    rc_recovery(world, ("trap", code, raiser_pid))


# -- fatality determination and servicing (bottom half) -----------------------

def service_bottom_half(world) -> list[str]:
    """Process queued fault records; returns one outcome label per record."""
    uvm = world.uvm
    outcomes = []
    records = uvm.replayable_buf.drain() + uvm.nonreplayable_buf.drain()
    for record in records:
        world.trace.emit(world.clock.now, "uvm", "bh_service",
                         scenario=record.scenario, channel=record.channel_id)
        if record.fatality_stage == "parse-time":
            # Nothing software can do; never interceptable.
            world.trace.emit(world.clock.now, "uvm", "parse_fatal",
                             scenario=record.scenario)
            _report_fatal(world, record)
            outcomes.append("fatal")
        elif record.serviceable:
            _begin_benign_service(world, record)
            outcomes.append("serviced")
        elif uvm.isolation_enabled:
            intercept_and_isolate(world, record)
            outcomes.append("isolated")
        else:
            _report_fatal(world, record)
            outcomes.append("fatal")
    return outcomes


def _begin_benign_service(world, record: FaultRecord):
    latency = world.params.benign_service_us
    world.schedule(latency, "uvm", "benign_done",
                   channel=record.channel_id, scenario=record.scenario,
                   va=record.seed.va)


def finish_benign_service(world, ev):
    """Resolve a serviceable fault, then replay or resume the blocked TSG."""
    channel_id = ev.args["channel"]
    scenario = ev.args["scenario"]
    va = ev.args["va"]
    ch = world.gpu.channels.get(channel_id)
    if ch is None or ch.state is ChannelState.TORN_DOWN:
        return
    pid = world.uvm.channel_to_pid[channel_id]
    if scenario != "benign.invalid_prefetch.sm":
        rng = world.mem.range_at(pid, va)
        if rng is not None:
            world.mem.populate_page(world, rng, rng.page_index(va))
    world.trace.emit(world.clock.now, "uvm", "benign_serviced", scenario=scenario)
    world.gpu.resume_tsg(world, ch.tsg_id)
    _replay_channel(world, ch, ignore=scenario == "benign.invalid_prefetch.sm")


def _replay_channel(world, ch, ignore=False):
    """Re-issue the faulted command once the fault is resolved."""
    if ch.inflight is None:
        return
    world.trace.emit(world.clock.now, ch.id, "replay", cmd=ch.inflight.kind)
    if ignore:
        world.gpu.complete_command(world, ch.id)
    else:
        world.execute_command(world, ch, ch.inflight)


# -- fatal reporting and RC recovery ------------------------------------------

def _report_fatal(world, record: FaultRecord):
    if record.replayable:
        # The driver invalidates stale translations before handing over.
        world.trace.emit(world.clock.now, "uvm", "tlb_invalidate",
                         channel=record.channel_id)
    world.trace.emit(world.clock.now, "uvm", "fatal_report",
                     scenario=record.scenario, channel=record.channel_id)
    world.rmgsp.fatal_reports.append(record)
    rc_recovery(world, record)


def rc_recovery(world, source) -> list[str]:
    """Firmware recovery: tear down every channel of the affected TSG.

    An execution-exception TRAP carries no channel identity, so recovery falls
    back to the shared GR TSG whenever an MPS session exists. Clients whose
    context dies are terminated; the surviving owner of a per-client TSG gets
    an error notifier instead.
    """
    gpu = world.gpu
    if isinstance(source, tuple):  # ("trap", code, raiser_pid)
        _, code, raiser_pid = source
        if gpu.mps_session is not None and raiser_pid in gpu.mps_session.client_pids:
            tsg_id = gpu.mps_session.gr_tsg
        else:
            tsg_id = gpu.client_channel(raiser_pid, EngineClass.SM).tsg_id
        error = code
    else:
        tsg_id = gpu.channels[source.channel_id].tsg_id
        error = source.scenario
    tsg = gpu.tsgs[tsg_id]
    if tsg.kind is TsgKind.SHARED_GR:
        notified = list(gpu.mps_session.client_pids)
    else:
        notified = sorted({gpu.channels[c].owner_pid for c in tsg.channel_ids})
    for pid in notified:
        client = gpu.clients[pid]
        client.error_notifier = error
        world.rmgsp.error_notifier[client.context_id] = error
        world.trace.emit(world.clock.now, pid, "error_notifier", error=error)
    world.trace.emit(world.clock.now, "rmgsp", "rc_recovery", tsg=tsg_id, error=error)
    return gpu.teardown_tsg(world, tsg_id, reason="rc-recovery")


# -- isolation ----------------------------------------------------------------

def intercept_and_isolate(world, record: FaultRecord) -> IsolationOutcome:
    """Resolve a fatal fault with dummy backing, then terminate only its raiser.

    Mechanism choice depends on the address's range state: no range at all
    means a fresh one-page managed range (M1), an existing managed range gets
    its backing chunk substituted (M2), and an external range is destroyed and
    recreated as managed with the large dummy chunk pre-installed (M3).
    """
    if record.channel_id is None:
        raise NoChannelAttribution("isolation needs the faulting channel id")
    mem = world.mem
    pid = world.uvm.channel_to_pid[record.channel_id]
    va = record.seed.va
    rng = mem.range_at(pid, va)
    if rng is None:
        mechanism = "M1"
        page_base = va - (va % PAGE_SIZE)
        newr = mem.create_managed_at(world, pid, page_base)
        mem.install_dummy_page(world, newr, 0)
    elif rng.kind is RangeKind.MANAGED:
        mechanism = "M2"
        mem.install_dummy_page(world, rng, rng.page_index(va))
    else:
        mechanism = "M3"
        mem.convert_external_to_managed(world, rng)
    latency = world.params.mechanism_latency_us(mechanism)
    world.trace.emit(world.clock.now, "uvm", "isolate_begin",
                     mechanism=mechanism, scenario=record.scenario,
                     pid=pid, latency_us=latency)
    outcome = IsolationOutcome(mechanism=mechanism, terminated_pid=pid,
                               latency_us=latency, scenario=record.scenario)
    world.uvm.isolation_outcomes.append(outcome)
    world.schedule(latency, "uvm", "isolation_done",
                   channel=record.channel_id, pid=pid, mechanism=mechanism)
    return outcome


def finish_isolation(world, ev):
    """End of the interception window: kill the raiser, resume the survivors.

    By this point the hardware has no kernels of the faulting client in
    flight, so the kill cannot corrupt co-running work. No fatal report is
    ever sent, so the firmware never runs RC recovery for this fault.
    """
    pid = ev.args["pid"]
    channel_id = ev.args["channel"]
    ch = world.gpu.channels.get(channel_id)
    tsg_id = ch.tsg_id if ch is not None else None
    client = world.gpu.clients.get(pid)
    if client is not None and client.state is ClientState.RUNNING:
        terminate_client(world, pid, "isolation")
    world.trace.emit(world.clock.now, "uvm", "isolate_done",
                     mechanism=ev.args["mechanism"], pid=pid)
    if tsg_id is not None:
        world.gpu.resume_tsg(world, tsg_id)


# -- client termination --------------------------------------------------------

def terminate_client(world, pid: str, reason: str):
    """Kill one client: channels, private TSGs, VA ranges, liveness links.

    VMM allocations merely drop one reference, so anything aliased into a
    surviving process stays resident.
    """
    gpu = world.gpu
    client = gpu.clients.get(pid)
    if client is None or client.state is not ClientState.RUNNING:
        raise UnknownPid(f"no live client {pid}")
    client.state = ClientState.TERMINATED
    client.terminate_reason = reason
    if client.workload is not None:
        client.workload.on_terminated(world, reason)
    owned_tsgs = []
    for ch_id in client.channel_ids.values():
        ch = gpu.channels[ch_id]
        if ch.state is not ChannelState.TORN_DOWN:
            if ch.tsg_id not in owned_tsgs:
                owned_tsgs.append(ch.tsg_id)
            gpu.teardown_channel(world, ch_id)
    for tsg_id in owned_tsgs:
        tsg = gpu.tsgs[tsg_id]
        if tsg.kind is not TsgKind.SHARED_GR and not tsg.channel_ids:
            tsg.state = TsgState.DESTROYED
            gpu.scheduler.remove(tsg_id)
            world.trace.emit(world.clock.now, tsg_id, "tsg_teardown",
                             reason="owner-exit")
    mem_before = world.mem.live_pages
    world.mem.release_client(world, pid)
    world.unregister(pid)
    for link in getattr(world, "liveness_links", []):
        if link.active_pid == pid and link.state == "open":
            link.close(world)
    world.trace.emit(world.clock.now, pid, "terminate", reason=reason,
                     freed_pages=mem_before - world.mem.live_pages)
    world.mem.check_conservation()
