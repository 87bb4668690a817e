"""Event-driven simulation core: virtual clock, ordered event queue, trace log.

Time is integer microseconds everywhere. Event dispatch order is the total
order (fire_at, insertion seq), so two runs of the same build produce
bit-identical traces. All randomness flows from one seeded generator; modules
draw sub-streams keyed by entity id.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import LivelockDetected

PAGE_SIZE = 4096
DUMMY_CHUNK_PAGES = 512  # 2 MiB at 4 KiB pages


@dataclass
class SimParams:
    """Tunable knobs for one simulated world.

    Latencies default to measured round numbers for each handling path and are
    deliberately integers; sub-microsecond precision would buy nothing but
    float nondeterminism.
    """

    seed: int = 0

    # Fault-handling latency per path (us).
    benign_service_us: int = 226
    m1_latency_us: int = 131
    m2_latency_us: int = 2780
    m3_latency_us: int = 1700

    # Active-standby recovery protocol.
    sync_interval_n: int = 16
    sync_latency_us: int = 8
    wake_warmup_us: int = 30_000
    ring_capacity: int = 1024

    # Workload timing.
    decode_step_us: int = 10_000
    prefill_step_us: int = 10_000
    prefill_chunk_tokens: int = 64
    victim_iter_us: int = 5000

    # Memory geometry.
    gpu_pages: int = 65_536
    dummy_page_size: int = PAGE_SIZE
    kv_block_size: int = 16
    per_process_overhead_pages: int = 16

    # Scheduling.
    time_slice_us: int = 1000

    # Token generation.
    vocab_size: int = 32_768

    livelock_budget: int = 10_000_000

    def __post_init__(self):
        for name in (
            "benign_service_us",
            "m1_latency_us",
            "m2_latency_us",
            "m3_latency_us",
            "sync_latency_us",
            "wake_warmup_us",
            "decode_step_us",
            "prefill_step_us",
            "victim_iter_us",
            "time_slice_us",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.sync_interval_n < 1:
            raise ValueError("sync_interval_n must be >= 1")
        if self.kv_block_size < 1:
            raise ValueError("kv_block_size must be >= 1")

    def mechanism_latency_us(self, mechanism: str) -> int:
        return {
            "benign": self.benign_service_us,
            "M1": self.m1_latency_us,
            "M2": self.m2_latency_us,
            "M3": self.m3_latency_us,
        }[mechanism]


class VirtualClock:
    """Monotonic simulated clock; advances only from the dispatch loop."""

    def __init__(self):
        self.now = 0

    def advance(self, to: int):
        if to < self.now:
            raise ValueError(f"clock would move backwards: {self.now} -> {to}")
        self.now = to


@dataclass
class Event:
    fire_at: int
    seq: int
    target: str
    kind: str
    args: dict


class Trace:
    """Append-only run log; one record per state mutation.

    Rendered as line-delimited text (`t=.. who=.. kind=.. k=v ..`) so golden
    files and byte-identity checks are trivial.
    """

    def __init__(self):
        self.records: list[tuple] = []

    def emit(self, t: int, who: str, kind: str, **fields):
        self.records.append((t, who, kind, tuple(fields.items())))

    @staticmethod
    def render_record(rec) -> str:
        t, who, kind, fields = rec
        parts = [f"t={t}", f"who={who}", f"kind={kind}"]
        parts.extend(f"{k}={v}" for k, v in fields)
        return " ".join(parts)

    def render(self) -> str:
        return "\n".join(self.render_record(r) for r in self.records) + (
            "\n" if self.records else ""
        )


def parse_trace_line(line: str) -> dict:
    """Inverse of Trace.render_record for one line; values stay strings
    except the timestamp."""
    out = {}
    for part in line.split(" "):
        k, _, v = part.partition("=")
        out[k] = v
    out["t"] = int(out["t"])
    return out


def parse_trace_text(text: str):
    for line in text.splitlines():
        if line:
            yield parse_trace_line(line)


@dataclass
class RunReport:
    end_time: int
    event_count: int
    client_states: dict
    trace_text: str


class World:
    """Owner of one simulated run: clock, queue, trace, and attached models.

    The machine assembly step hangs the GPU model, memory model, and fault
    pipeline off this object; the kernel itself only knows how to order and
    deliver events.
    """

    def __init__(self, params: SimParams):
        self.params = params
        self.clock = VirtualClock()
        self.trace = Trace()
        self._heap: list[tuple[int, int, int]] = []  # (fire_at, seq, event_id)
        self._pending: dict[int, Event] = {}
        self._seq = 0
        self._next_event_id = 1
        self._handlers: dict[str, Callable] = {}
        self._finalizers: list[Callable] = []
        self.pump_hook: Optional[Callable] = None
        self.dispatched_events = 0

    # -- randomness ---------------------------------------------------------

    def rng_for(self, entity_id: str) -> random.Random:
        """Deterministic sub-stream for one entity, derived from the run seed."""
        return random.Random(f"{self.params.seed}:{entity_id}")

    # -- entity registry ----------------------------------------------------

    def register(self, entity_id: str, handler: Callable):
        self._handlers[entity_id] = handler

    def unregister(self, entity_id: str):
        self._handlers.pop(entity_id, None)

    def add_finalizer(self, fn: Callable):
        self._finalizers.append(fn)

    # -- event queue --------------------------------------------------------

    def schedule(self, delay: int, target: str, kind: str, **args) -> int:
        if delay < 0:
            raise ValueError("delay must be >= 0")
        event_id = self._next_event_id
        self._next_event_id += 1
        ev = Event(self.clock.now + delay, self._seq, target, kind, args)
        self._seq += 1
        self._pending[event_id] = ev
        heapq.heappush(self._heap, (ev.fire_at, ev.seq, event_id))
        return event_id

    def cancel(self, event_id: int):
        # Lazy deletion; the heap entry becomes a tombstone.
        self._pending.pop(event_id, None)

    def event_fire_at(self, event_id: int) -> int:
        return self._pending[event_id].fire_at

    def pending_count(self) -> int:
        return len(self._pending)

    # -- dispatch loop ------------------------------------------------------

    def run_until_quiescent(self, max_time: Optional[int] = None) -> RunReport:
        if self.pump_hook is not None:
            self.pump_hook(self)
        while self._heap:
            fire_at, _seq, event_id = self._heap[0]
            if event_id not in self._pending:
                heapq.heappop(self._heap)
                continue
            if max_time is not None and fire_at > max_time:
                break
            heapq.heappop(self._heap)
            ev = self._pending.pop(event_id)
            self.clock.advance(ev.fire_at)
            self.dispatched_events += 1
            if self.dispatched_events > self.params.livelock_budget:
                raise LivelockDetected(
                    f"dispatched more than {self.params.livelock_budget} events"
                )
            handler = self._handlers.get(ev.target)
            if handler is None:
                self.trace.emit(
                    self.clock.now, "world", "event_drop",
                    target=ev.target, event=ev.kind,
                )
            else:
                handler(self, ev)
            if self.pump_hook is not None:
                self.pump_hook(self)
        for fn in self._finalizers:
            fn(self)
        client_states = getattr(self, "final_client_states", {})
        return RunReport(
            end_time=self.clock.now,
            event_count=self.dispatched_events,
            client_states=client_states,
            trace_text=self.trace.render(),
        )
