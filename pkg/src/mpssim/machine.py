"""World assembly: wires the GPU model, memory model, and fault pipeline onto
the event core, and routes commands and events between them.

Command execution lives here because it spans subsystems: dispatching a
command may translate an address (memory), raise a fault (pipeline), or just
burn simulated time (a completion event back to the channel).
"""

from __future__ import annotations

from . import pipeline, recovery, workload
from .execmodel import ClientState, EngineClass, GpuModel
from .faults import DispatchGates
from .kernel import PAGE_SIZE, SimParams, World
from .memory import AccessType, Hit, MemoryModel


def build_world(params: SimParams) -> World:
    world = World(params)
    world.gpu = GpuModel(params)
    world.mem = MemoryModel(world)
    world.uvm = pipeline.UvmHandler()
    world.rmgsp = pipeline.RmGsp()
    world.gates = DispatchGates()
    world.services = {}
    world.pairs = {}
    world.liveness_links = []
    world.standby_instances = {}
    world.recovery_reports = []
    world.request_log = {}
    world.crash_progress = {}
    world.execute_command = execute_command
    world.terminate_client = pipeline.terminate_client
    world.pump_hook = lambda w: w.gpu.pump(w)
    world.register("uvm", _uvm_handler)
    world.register("sched", _sched_handler)
    world.add_finalizer(_finalize)
    return world


# -- clients ------------------------------------------------------------------

def create_client(world, mode: str):
    """Create a process: channels wired into TSGs plus its fixed GPU overhead
    (context and scheduling metadata, modeled as one device allocation)."""
    client = world.gpu.create_client(world, mode)
    pipeline.register_client_channels(world, client)
    overhead = world.params.per_process_overhead_pages
    if overhead > 0:
        world.mem.alloc_device(world, client.pid, overhead * PAGE_SIZE)
    world.register(client.pid, _client_handler)
    for ch_id in client.channel_ids.values():
        world.register(ch_id, _channel_handler)
    world.mem.check_conservation()
    return client


def attach_serving(world, client, spec: workload.WorkloadSpec, service: str,
                   handles=None, pool=None):
    """Give a client a serving engine; allocates weights and KV pool unless
    shared handles are supplied."""
    mem = world.mem
    if handles is None:
        wh = mem.vmm_create(world, spec.weight_pages * PAGE_SIZE)
        mem.vmm_map(world, client.pid, wh)
        mem.allocations[wh].write_tag(world.params.seed * 2654435761 + 1)
        kh = mem.vmm_create(world, spec.kv_blocks * PAGE_SIZE)
        mem.vmm_map(world, client.pid, kh)
        mem.release_handle(world, wh)
        mem.release_handle(world, kh)
        handles = (wh, kh)
        pool = workload.BlockPool(spec.kv_blocks)
    engine = workload.ServingWorkload(
        world, client.pid, spec, pool, handles[0], handles[1], service,
    )
    client.workload = engine
    world.services.setdefault(service, client.pid)
    world.register(f"svc:{service}", _service_handler)
    return engine


def attach_victim(world, client, spec: workload.WorkloadSpec):
    client.workload = workload.VictimWorkload(world, client.pid, spec)
    return client.workload


def attach_injector(world, client, spec: workload.WorkloadSpec):
    client.workload = workload.InjectorWorkload(world, client.pid, spec)
    return client.workload


def schedule_request(world, service: str, spec: workload.RequestSpec):
    world.request_log[spec.rid] = spec
    world.schedule(spec.arrival_us, f"svc:{service}", "request_arrival",
                   rid=spec.rid)


# -- command execution ----------------------------------------------------------

def execute_command(world, ch, cmd):
    """Run one dispatched command to its next boundary.

    Memory-touching commands resolve their address now; a hit completes after
    the command's duration, a miss hands a fault seed to the pipeline and the
    command stays in flight until replay or teardown.
    """
    kind = cmd.kind
    if kind == "compute":
        ch.inflight_event = world.schedule(cmd.args["duration_us"], ch.id,
                                           "cmd_complete")
        return
    if kind in ("access", "copy", "sem_wait"):
        if kind == "access":
            access = AccessType(cmd.args["access"])
        elif kind == "copy":
            access = AccessType(cmd.args.get("access", "write"))
        else:
            access = AccessType.READ
        result = world.mem.resolve_va(
            world, ch.owner_pid, cmd.args["va"], access, ch.engine_class,
            channel_id=ch.id,
        )
        if isinstance(result, Hit):
            ch.inflight_event = world.schedule(0, ch.id, "cmd_complete")
        else:
            pipeline.raise_mmu_fault(world, result.seed)
        return
    if kind == "exception":
        pipeline.raise_sm_trap(world, cmd.args["code"], sm_id=0,
                               raiser_pid=ch.owner_pid)
        return
    if kind == "parse_fault":
        pipeline.raise_parse_time_fault(world, ch.id, cmd.args["category"])
        return
    raise ValueError(f"unknown command kind {kind}")


# -- event handlers --------------------------------------------------------------

def _channel_handler(world, ev):
    if ev.kind != "cmd_complete":
        return
    ch = world.gpu.channels.get(ev.target)
    if ch is None:
        return
    cmd = world.gpu.complete_command(world, ev.target)
    if cmd is None:
        return
    client = world.gpu.clients.get(ch.owner_pid)
    if client is not None and client.workload is not None:
        client.workload.on_command_complete(world, ch, cmd)


def _client_handler(world, ev):
    client = world.gpu.clients.get(ev.target)
    if client is None or client.state is not ClientState.RUNNING:
        return
    if ev.kind == "link_closed":
        recovery.failover(world, ev.target)
        return
    if ev.kind == "wake_done":
        recovery.complete_wake(world, ev.target)
        return
    if ev.kind == "inject":
        from . import faults

        faults.inject(world, ev.target, ev.args["trigger"],
                      privileged=bool(ev.args.get("privileged")))
        return
    if client.workload is not None:
        client.workload.on_event(world, ev)


def _service_handler(world, ev):
    if ev.kind != "request_arrival":
        return
    service = ev.target.split(":", 1)[1]
    pid = world.services.get(service)
    spec = world.request_log[ev.args["rid"]]
    client = world.gpu.clients.get(pid)
    if client is None or client.state is not ClientState.RUNNING:
        world.trace.emit(world.clock.now, ev.target, "request_drop",
                         req=spec.rid)
        return
    client.workload.add_request(world, spec)


def _uvm_handler(world, ev):
    if ev.kind == "bottom_half":
        if world.uvm.replayable_buf.queue or world.uvm.nonreplayable_buf.queue:
            pipeline.service_bottom_half(world)
    elif ev.kind == "benign_done":
        pipeline.finish_benign_service(world, ev)
    elif ev.kind == "isolation_done":
        pipeline.finish_isolation(world, ev)


def _sched_handler(world, ev):
    if ev.kind == "slice_tick":
        pass  # the tick's dispatch already advanced the clock


def _finalize(world):
    states = {}
    for pid in sorted(world.gpu.clients):
        client = world.gpu.clients[pid]
        states[pid] = {
            "mode": client.mode,
            "state": client.state.value,
            "reason": client.terminate_reason or "-",
            "notifier": client.error_notifier or "-",
        }
        world.trace.emit(world.clock.now, pid, "client_final",
                         state=client.state.value,
                         reason=client.terminate_reason or "-",
                         notifier=client.error_notifier or "-")
    world.final_client_states = states
    world.trace.emit(world.clock.now, "world", "run_end",
                     events=world.dispatched_events)
    world.mem.check_conservation()
