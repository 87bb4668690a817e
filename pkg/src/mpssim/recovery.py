"""Active-standby fast recovery with cross-process state aliasing.

The active instance serves inside the MPS session; the standby runs as a
standalone process outside it, so TSG-granularity recovery can never touch it.
Model weights and the KV pool are single physical allocations mapped into both
processes, alive while either mapping remains. While the active instance is
healthy the standby sleeps and issues no GPU work at all.

What physical sharing cannot carry is the interpretation of that memory, so
the active instance publishes per-request deltas (new KV block ids, new
tokens, progress) into a single-producer single-consumer ring after every Nth
forward pass, after each prefill completes, and at request completion. On
active-process death, detected by liveness-link closure and nothing else, the
standby wakes, folds the consumed deltas back into engine state, skips
prefill, and regenerates at most the tokens published since the last delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import InvalidInterval, NoMpsSession, RingSaturated
from .kernel import PAGE_SIZE, parse_trace_text
from .workload import BlockPool, RequestSpec, ServeRequest, ServingWorkload, WorkloadSpec


@dataclass
class ForwardSnapshot:
    request_id: str
    seq: int
    kv_block_ids_delta: list[int]
    token_delta: list[int]
    progress: int
    done: bool = False


class SnapshotRing:
    """Single producer, single consumer; overwriting live data is an error."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: list[Optional[ForwardSnapshot]] = [None] * capacity
        self.producer_seq = 0
        self.consumer_seq = 0
        self.consume_enabled = True  # test hook for saturation behavior

    def push(self, snap: ForwardSnapshot):
        if self.producer_seq - self.consumer_seq >= self.capacity:
            raise RingSaturated(
                f"{self.capacity} unconsumed deltas; producer must not overwrite"
            )
        self.entries[self.producer_seq % self.capacity] = snap
        self.producer_seq += 1

    def consume_all(self) -> list[ForwardSnapshot]:
        out = []
        while self.consumer_seq < self.producer_seq:
            out.append(self.entries[self.consumer_seq % self.capacity])
            self.consumer_seq += 1
        return out


@dataclass
class FoldedRequest:
    block_ids: list[int] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    progress: int = 0
    done: bool = False


class StandbyInstance:
    """Sleeping replica: folds consumed deltas, ready to take over on wake."""

    def __init__(self, pid: str, weights_handle: int, kv_handle: int):
        self.pid = pid
        self.state = "sleeping"
        self.weights_handle = weights_handle
        self.kv_handle = kv_handle
        self.last_consumed_seq = 0
        self.folded: dict[str, FoldedRequest] = {}

    def fold(self, snap: ForwardSnapshot):
        if not snap.request_id:
            self.last_consumed_seq = snap.seq
            return
        entry = self.folded.setdefault(snap.request_id, FoldedRequest())
        entry.block_ids.extend(snap.kv_block_ids_delta)
        entry.tokens.extend(snap.token_delta)
        entry.progress = snap.progress
        entry.done = entry.done or snap.done
        self.last_consumed_seq = snap.seq


@dataclass
class LivenessLink:
    active_pid: str
    standby_pid: str
    service: str
    state: str = "open"
    closed_at: Optional[int] = None

    def close(self, world):
        self.state = "closed"
        self.closed_at = world.clock.now
        world.trace.emit(world.clock.now, self.standby_pid, "link_closed",
                         peer=self.active_pid)
        world.schedule(0, self.standby_pid, "link_closed")


class RecoveryReport:
    """Observed takeover metrics for one failover."""

    def __init__(self, active_pid, standby_pid, crash_time, targets,
                 replayed_steps, first_resumed, degraded):
        self.active_pid = active_pid
        self.standby_pid = standby_pid
        self.crash_time = crash_time
        self.targets = targets              # rid -> progress at crash
        self.replayed_steps = replayed_steps
        self.first_resumed = first_resumed  # rid -> first regenerated index
        self.degraded = degraded
        self.wake_done_time: Optional[int] = None
        self.outage_us: Optional[int] = None
        self.complete = False

    def note_progress(self, world, engine):
        if self.complete:
            return
        for rid, goal in self.targets.items():
            req = engine.requests.get(rid)
            if req is None or (req.progress < goal and req.state != "done"):
                return
        self.complete = True
        self.outage_us = world.clock.now - self.crash_time
        world.trace.emit(world.clock.now, self.standby_pid, "recovery_done",
                         outage_us=self.outage_us,
                         replayed=self.replayed_steps,
                         degraded=int(self.degraded))


@dataclass
class PairInfo:
    service: str
    active_pid: str
    standby_pid: str
    ring: SnapshotRing
    standby: StandbyInstance
    link: LivenessLink
    weights_handle: int
    kv_handle: int
    spec: WorkloadSpec
    sync_interval: int


def deploy_pair(world, spec: WorkloadSpec, n: int, service: str = "svc"):
    """Stand up an active/standby pair with aliased weights and KV pool.

    Physical footprint is one copy of each shared allocation plus the
    per-process overhead of two clients, not two copies.
    """
    from . import machine

    if n < 1:
        raise InvalidInterval(f"sync interval must be >= 1, got {n}")
    if world.gpu.mps_session is None:
        raise NoMpsSession("the active instance joins an existing MPS session")
    mem = world.mem
    weights_handle = mem.vmm_create(world, spec.weight_pages * PAGE_SIZE)
    kv_handle = mem.vmm_create(world, spec.kv_blocks * PAGE_SIZE)
    # Simulated weight load: one content tag derived from the run seed.
    mem.allocations[weights_handle].write_tag(world.params.seed * 2654435761 + 1)

    active = machine.create_client(world, "mps-client")
    mem.vmm_map(world, active.pid, weights_handle)
    mem.vmm_map(world, active.pid, kv_handle)
    active_engine = machine.attach_serving(
        world, active, spec, service=service,
        handles=(weights_handle, kv_handle), pool=BlockPool(spec.kv_blocks),
    )

    standby = machine.create_client(world, "standalone")
    mem.vmm_map(world, standby.pid, weights_handle)
    mem.vmm_map(world, standby.pid, kv_handle)
    standby_engine = machine.attach_serving(
        world, standby, spec, service=service + ".standby",
        handles=(weights_handle, kv_handle), pool=BlockPool(spec.kv_blocks),
    )
    standby_engine.sleeping = True

    # Creation references are dropped once both processes hold mappings.
    mem.release_handle(world, weights_handle)
    mem.release_handle(world, kv_handle)

    ring = SnapshotRing(world.params.ring_capacity)
    inst = StandbyInstance(standby.pid, weights_handle, kv_handle)
    link = LivenessLink(active.pid, standby.pid, service)
    world.liveness_links.append(link)
    world.standby_instances[standby.pid] = inst
    pair = PairInfo(service=service, active_pid=active.pid,
                    standby_pid=standby.pid, ring=ring, standby=inst,
                    link=link, weights_handle=weights_handle,
                    kv_handle=kv_handle, spec=spec, sync_interval=n)
    world.pairs[service] = pair
    world.services[service] = active.pid
    active_engine.sync_interval = n
    active_engine.publisher = _make_publisher(world, pair, active_engine)
    world.trace.emit(world.clock.now, service, "pair_deploy",
                     active=active.pid, standby=standby.pid, n=n,
                     weights=weights_handle, kv=kv_handle)
    mem.check_conservation()
    return active.pid, standby.pid


def _make_publisher(world, pair: PairInfo, engine: ServingWorkload):
    def publish(world, prefill_finished, completed):
        publish_snapshot(world, pair, engine,
                         done_rids=set(completed))
    return publish


def publish_snapshot(world, pair: PairInfo, engine: ServingWorkload,
                     done_rids=frozenset()):
    """Append one incremental delta per in-flight request; returns last seq.

    An empty publish still advances the sequence number so the consumer can
    observe liveness of the producer.
    """
    ring = pair.ring
    inflight = [rid for rid in engine.order
                if engine.requests[rid].state in ("prefilling", "decoding")
                or rid in done_rids]
    published_any = False
    for rid in inflight:
        req = engine.requests[rid]
        prev = engine.last_published.get(rid, {"progress": 0, "blocks": 0})
        table = engine.block_tables[rid]
        snap = ForwardSnapshot(
            request_id=rid,
            seq=ring.producer_seq + 1,
            kv_block_ids_delta=list(table[prev["blocks"]:]),
            token_delta=list(engine.outputs[rid][prev["progress"]:]),
            progress=req.progress,
            done=rid in done_rids,
        )
        ring.push(snap)
        engine.last_published[rid] = {"progress": req.progress,
                                      "blocks": len(table)}
        world.trace.emit(world.clock.now, engine.pid, "snap_pub",
                         req=rid, seq=snap.seq, d_tokens=len(snap.token_delta),
                         d_blocks=len(snap.kv_block_ids_delta),
                         progress=snap.progress, done=int(snap.done))
        published_any = True
    if not published_any:
        snap = ForwardSnapshot(request_id="", seq=ring.producer_seq + 1,
                               kv_block_ids_delta=[], token_delta=[],
                               progress=0)
        ring.push(snap)
        world.trace.emit(world.clock.now, engine.pid, "snap_pub",
                         req="-", seq=snap.seq, d_tokens=0, d_blocks=0,
                         progress=0, done=0)
    if ring.consume_enabled:
        for snap in ring.consume_all():
            pair.standby.fold(snap)
            world.trace.emit(world.clock.now, pair.standby_pid, "snap_consume",
                             seq=snap.seq)
    return ring.producer_seq


def failover(world, standby_pid: str) -> RecoveryReport:
    """Wake the standby and resume serving from the folded snapshot state.

    Behavior depends only on liveness-link closure; which fault killed the
    active instance is invisible here by construction.
    """
    pair = None
    for p in world.pairs.values():
        if p.standby_pid == standby_pid:
            pair = p
            break
    assert pair is not None, f"no pair with standby {standby_pid}"
    assert pair.link.state == "closed", "failover requires a closed liveness link"
    inst = pair.standby
    assert inst.state == "sleeping", "standby already woke"
    inst.state = "waking"
    crash_time = pair.link.closed_at
    targets = dict(getattr(world, "crash_progress", {}).get(pair.active_pid, {}))
    degraded = pair.ring.producer_seq == 0
    replayed = 0
    first_resumed = {}
    for rid, goal in targets.items():
        folded = inst.folded.get(rid)
        base = folded.progress if folded is not None else 0
        replayed = max(replayed, goal - base)
        first_resumed[rid] = base + 1
    report = RecoveryReport(
        active_pid=pair.active_pid, standby_pid=standby_pid,
        crash_time=crash_time, targets=targets, replayed_steps=replayed,
        first_resumed=first_resumed, degraded=degraded,
    )
    world.recovery_reports.append(report)
    world.trace.emit(world.clock.now, standby_pid, "standby_wake",
                     degraded=int(degraded))
    world.schedule(world.params.wake_warmup_us, standby_pid, "wake_done")
    world.pending_failover = getattr(world, "pending_failover", {})
    world.pending_failover[standby_pid] = report
    return report


def complete_wake(world, standby_pid: str):
    """Warmup finished: fold state into the engine and resume the service."""
    pair = None
    for p in world.pairs.values():
        if p.standby_pid == standby_pid:
            pair = p
            break
    report = world.pending_failover.pop(standby_pid)
    report.wake_done_time = world.clock.now
    inst = pair.standby
    inst.state = "active"
    client = world.gpu.clients[standby_pid]
    engine: ServingWorkload = client.workload
    engine.sleeping = False
    for rid, fold in inst.folded.items():
        spec = world.request_log[rid]
        prompt_chunks = max(1, -(-spec.prompt_len //
                                 world.params.prefill_chunk_tokens))
        from .workload import make_prompt

        req = ServeRequest(
            rid=rid,
            prompt=make_prompt(world.params.seed, rid, spec.prompt_len,
                               world.params.vocab_size),
            max_new=spec.max_new,
            state="done" if fold.done else "decoding",
            progress=fold.progress if not fold.done else spec.max_new,
            prefill_chunks_done=prompt_chunks,
            prefill_chunks_needed=prompt_chunks,
        )
        engine.requests[rid] = req
        engine.order.append(rid)
        engine.outputs[rid] = list(fold.tokens)
        engine.block_tables[rid] = list(fold.block_ids)
        engine.pool.reserve(fold.block_ids)
        if not fold.done:
            world.trace.emit(world.clock.now, standby_pid, "resume_request",
                             req=rid, from_progress=fold.progress,
                             blocks=len(fold.block_ids))
    # Requests that arrived but never reached a published snapshot are
    # re-served from the request log (full re-prefill path).
    crash = report.crash_time
    for rid, spec in world.request_log.items():
        if rid in engine.requests or spec.arrival_us > crash:
            continue
        engine.add_request(world, spec)
        world.trace.emit(world.clock.now, standby_pid, "reprefill_request",
                         req=rid)
    world.services[pair.service] = standby_pid
    engine.catchup_report = report
    world.trace.emit(world.clock.now, standby_pid, "wake_done",
                     warmup_us=world.params.wake_warmup_us)
    report.note_progress(world, engine)
    engine.maybe_start_step(world)


# -- output verification --------------------------------------------------------

@dataclass
class EqualityVerdict:
    equal: bool
    compared_requests: int
    mismatches: list  # (rid, index, got, expected)


def outputs_from_trace(trace_text: str) -> dict[str, list[int]]:
    outputs = {}
    for rec in parse_trace_text(trace_text):
        if rec["kind"] == "request_done":
            toks = rec["tokens"]
            outputs[rec["req"]] = [int(t) for t in toks.split(",")] if toks else []
    return outputs


def verify_output_equality(recovered_trace: str, baseline_trace: str) -> EqualityVerdict:
    """Token-for-token comparison of every completed request's output."""
    got = outputs_from_trace(recovered_trace)
    want = outputs_from_trace(baseline_trace)
    mismatches = []
    for rid in sorted(want):
        g = got.get(rid)
        w = want[rid]
        if g is None:
            mismatches.append((rid, -1, None, None))
            continue
        for i in range(max(len(g), len(w))):
            a = g[i] if i < len(g) else None
            b = w[i] if i < len(w) else None
            if a != b:
                mismatches.append((rid, i, a, b))
                break
    return EqualityVerdict(equal=not mismatches, compared_requests=len(want),
                           mismatches=mismatches)
