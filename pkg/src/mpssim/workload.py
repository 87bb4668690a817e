"""Client programs that drive scenarios.

Two workload families ship: a toy autoregressive token-serving engine with
paged KV accounting (the protected service) and a generic kernel loop that
checks for errors after every iteration (the co-running victim). An injector
client exists purely to pull fault triggers.

Token generation is a pure function of (seed, request id, position, prompt),
so any process that replays a request regenerates the identical token stream.
That property is what makes post-failover output equality checkable at all.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import KvPoolExhausted
from .execmodel import EngineClass


class ToyGenerator:
    """Deterministic next-token function; stable across runs and processes."""

    def __init__(self, seed: int, vocab_size: int):
        self.seed = seed
        self.vocab_size = vocab_size

    def next_token(self, request_id: str, position: int, prompt: list[int]) -> int:
        payload = f"{self.seed}:{request_id}:{position}:{','.join(map(str, prompt))}"
        digest = hashlib.sha256(payload.encode()).digest()
        return int.from_bytes(digest[:8], "big") % self.vocab_size


def make_prompt(seed: int, request_id: str, length: int, vocab_size: int) -> list[int]:
    gen = ToyGenerator(seed, vocab_size)
    return [gen.next_token(f"prompt:{request_id}", i, []) for i in range(length)]


@dataclass
class RequestSpec:
    rid: str
    arrival_us: int
    prompt_len: int
    max_new: int


@dataclass
class ServeRequest:
    rid: str
    prompt: list[int]
    max_new: int
    state: str = "queued"  # queued | prefilling | decoding | done
    progress: int = 0
    prefill_chunks_done: int = 0
    prefill_chunks_needed: int = 1


class BlockPool:
    """Free-list over the block ids of one KV allocation; smallest id first."""

    def __init__(self, total_blocks: int):
        self.total_blocks = total_blocks
        self._free = list(range(total_blocks))
        heapq.heapify(self._free)

    def allocate(self) -> int:
        if not self._free:
            raise KvPoolExhausted("no free KV blocks")
        return heapq.heappop(self._free)

    def free(self, block_id: int):
        heapq.heappush(self._free, block_id)

    def reserve(self, block_ids: list[int]):
        taken = set(block_ids)
        self._free = [b for b in self._free if b not in taken]
        heapq.heapify(self._free)

    @property
    def free_count(self) -> int:
        return len(self._free)


@dataclass
class WorkloadSpec:
    kind: str  # "serving" | "victim" | "injector" | "idle"
    iterations: int = 6
    weight_pages: int = 64
    kv_blocks: int = 64
    options: dict = field(default_factory=dict)


class ServingWorkload:
    """Prefill/decode engine over paged KV blocks.

    Each engine pass advances every in-flight request by one unit: a prefill
    chunk while the prompt is being ingested, one generated token afterwards.
    Block demand is ceil((prompt + generated) / block_size) per request and
    blocks return to the pool the moment a request completes.
    """

    def __init__(self, world, pid: str, spec: WorkloadSpec, pool: BlockPool,
                 weights_handle: int, kv_handle: int, service: str):
        self.pid = pid
        self.spec = spec
        self.pool = pool
        self.weights_handle = weights_handle
        self.kv_handle = kv_handle
        self.service = service
        self.generator = ToyGenerator(world.params.seed, world.params.vocab_size)
        self.sync_interval = world.params.sync_interval_n
        self.requests: dict[str, ServeRequest] = {}
        self.order: list[str] = []
        self.block_tables: dict[str, list[int]] = {}
        self.outputs: dict[str, list[int]] = {}
        self.pass_count = 0
        self.decode_passes = 0
        self.sleeping = False
        self.publisher: Optional[Callable] = None
        self.last_published: dict[str, dict] = {}
        self.watchers: list[dict] = []
        self.catchup_report = None
        self.step_outstanding = False
        self.done = False

    # -- request intake -------------------------------------------------------

    def add_request(self, world, spec: RequestSpec):
        prompt = make_prompt(world.params.seed, spec.rid, spec.prompt_len,
                             world.params.vocab_size)
        chunk = world.params.prefill_chunk_tokens
        req = ServeRequest(
            rid=spec.rid, prompt=prompt, max_new=spec.max_new,
            prefill_chunks_needed=max(1, -(-len(prompt) // chunk)),
        )
        self.requests[spec.rid] = req
        self.order.append(spec.rid)
        self.outputs[spec.rid] = []
        self.block_tables[spec.rid] = []
        world.trace.emit(world.clock.now, self.pid, "request_arrive",
                         req=spec.rid, prompt_len=spec.prompt_len,
                         max_new=spec.max_new)
        self.maybe_start_step(world)

    # -- stepping -------------------------------------------------------------

    def _has_work(self) -> bool:
        return any(r.state in ("queued", "prefilling", "decoding")
                   for r in self.requests.values())

    def maybe_start_step(self, world):
        if self.sleeping or self.step_outstanding or not self._has_work():
            return
        for req in self.requests.values():
            if req.state == "queued":
                req.state = "prefilling"
        prefill = any(r.state == "prefilling" for r in self.requests.values())
        duration = (world.params.prefill_step_us if prefill
                    else world.params.decode_step_us)
        ch = world.gpu.client_channel(self.pid, EngineClass.SM)
        world.gpu.enqueue(world, ch.id, "compute", duration_us=duration,
                          engine_pass=1)
        self.step_outstanding = True

    def _blocks_needed(self, world, req: ServeRequest) -> int:
        covered = len(req.prompt) + req.progress
        return -(-covered // world.params.kv_block_size)

    def _grow_blocks(self, world, req: ServeRequest):
        table = self.block_tables[req.rid]
        while len(table) < self._blocks_needed(world, req):
            table.append(self.pool.allocate())
            world.trace.emit(world.clock.now, self.pid, "kv_alloc",
                             req=req.rid, block=table[-1])

    def on_command_complete(self, world, ch, cmd):
        if cmd.kind != "compute" or "engine_pass" not in cmd.args:
            return
        self.step_outstanding = False
        self.pass_count += 1
        decoded = False
        prefill_finished: list[str] = []
        completed: list[str] = []
        kv_alloc = world.mem.allocations.get(self.kv_handle)
        for rid in list(self.order):
            req = self.requests[rid]
            if req.state == "prefilling":
                req.prefill_chunks_done += 1
                if req.prefill_chunks_done >= req.prefill_chunks_needed:
                    req.state = "decoding"
                    self._grow_blocks(world, req)
                    world.trace.emit(world.clock.now, self.pid, "prefill_done",
                                     req=rid, blocks=len(self.block_tables[rid]))
                    prefill_finished.append(rid)
            elif req.state == "decoding":
                decoded = True
                req.progress += 1
                tok = self.generator.next_token(rid, req.progress - 1, req.prompt)
                self.outputs[rid].append(tok)
                self._grow_blocks(world, req)
                if kv_alloc is not None:
                    kv_alloc.write_tag((req.progress << 20) ^ tok)
                world.trace.emit(world.clock.now, self.pid, "token",
                                 req=rid, idx=req.progress, tok=tok)
                if req.progress >= req.max_new:
                    req.state = "done"
                    completed.append(rid)
        if decoded:
            self.decode_passes += 1
        published = False
        if self.publisher is not None:
            # Cadence counts decode passes so the replay arithmetic is exact:
            # a crash K tokens in replays K mod N of them. Prefill completion
            # and request completion force a publish regardless.
            due = ((decoded and self.decode_passes % self.sync_interval == 0)
                   or prefill_finished or completed)
            if due:
                self.publisher(world, prefill_finished, completed)
                published = True
        for rid in completed:
            for block in self.block_tables[rid]:
                self.pool.free(block)
                world.trace.emit(world.clock.now, self.pid, "kv_free",
                                 req=rid, block=block)
            self.block_tables[rid] = []
            world.trace.emit(
                world.clock.now, self.pid, "request_done", req=rid,
                tokens=",".join(map(str, self.outputs[rid])),
            )
        for watch in self.watchers:
            if watch.get("fired"):
                continue
            req = self.requests.get(watch["rid"])
            if req is not None and req.progress >= watch["progress"]:
                watch["fired"] = True
                watch["action"](world)
        if self.catchup_report is not None:
            self.catchup_report.note_progress(world, self)
        if not self._has_work():
            if not self.done:
                self.done = True
                world.trace.emit(world.clock.now, self.pid, "serving_done",
                                 passes=self.pass_count)
            return
        if published and world.params.sync_latency_us > 0:
            world.schedule(world.params.sync_latency_us, self.pid, "engine_next")
        else:
            self.maybe_start_step(world)

    def on_event(self, world, ev):
        if ev.kind == "engine_next":
            self.maybe_start_step(world)

    def on_terminated(self, world, reason):
        progress = {}
        for rid in self.order:
            req = self.requests[rid]
            if req.state != "done":
                progress[rid] = req.progress
            world.trace.emit(world.clock.now, self.pid, "serving_final",
                             req=rid, state=req.state, progress=req.progress)
        if not hasattr(world, "crash_progress"):
            world.crash_progress = {}
        world.crash_progress[self.pid] = progress


class VictimWorkload:
    """Launches a bounded number of kernels, checking for errors in between."""

    def __init__(self, world, pid: str, spec: WorkloadSpec):
        self.pid = pid
        self.iterations = spec.iterations
        self.completed = 0
        self.reported = False

    def start(self, world):
        self._launch(world)

    def _launch(self, world):
        ch = world.gpu.client_channel(self.pid, EngineClass.SM)
        world.gpu.enqueue(world, ch.id, "compute",
                          duration_us=world.params.victim_iter_us, victim_iter=1)

    def on_command_complete(self, world, ch, cmd):
        if "victim_iter" not in cmd.args:
            return
        self.completed += 1
        world.trace.emit(world.clock.now, self.pid, "victim_iter",
                         n=self.completed)
        client = world.gpu.clients[self.pid]
        if client.error_notifier is not None:
            self._report(world, "DIED")
            return
        if self.completed >= self.iterations:
            self._report(world, "ALIVE")
            return
        self._launch(world)

    def _report(self, world, status):
        if self.reported:
            return
        self.reported = True
        world.trace.emit(world.clock.now, self.pid, "victim_report",
                         status=status, iterations=self.completed)

    def on_event(self, world, ev):
        pass

    def on_terminated(self, world, reason):
        self._report(world, "DIED")


class InjectorWorkload:
    """Carrier process for fault triggers; owns no ongoing GPU work."""

    def __init__(self, world, pid: str, spec: WorkloadSpec):
        self.pid = pid

    def on_command_complete(self, world, ch, cmd):
        pass

    def on_event(self, world, ev):
        pass

    def on_terminated(self, world, reason):
        pass


class IdleWorkload:
    def __init__(self, world, pid: str, spec: WorkloadSpec):
        self.pid = pid

    def on_command_complete(self, world, ch, cmd):
        pass

    def on_event(self, world, ev):
        pass

    def on_terminated(self, world, reason):
        pass
