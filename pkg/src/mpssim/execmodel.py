"""GPU execution hierarchy: clients, channels, time-slice groups, MPS session.

Under MPS, every client's SM and PBDMA channels are multiplexed onto one
shared GR TSG while each client keeps a private CE TSG. Standalone processes
get a TSG of their own. This wiring alone decides how far a fatal fault
propagates: RC recovery tears down channels at TSG granularity.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import NoMpsSession, UnknownTsg


class EngineClass(str, Enum):
    SM = "sm"
    CE = "ce"
    PBDMA = "pbdma"


class ChannelState(str, Enum):
    IDLE = "idle"
    RUNNING = "running"
    STALLED = "stalled"
    PREEMPTED = "preempted"
    TORN_DOWN = "torn-down"


class TsgKind(str, Enum):
    SHARED_GR = "shared-gr"
    PER_CLIENT_CE = "per-client-ce"
    STANDALONE = "standalone"


class TsgState(str, Enum):
    ACTIVE = "active"
    STALLED = "stalled"
    PREEMPTED = "preempted"
    DESTROYED = "destroyed"


class ClientState(str, Enum):
    RUNNING = "running"
    TERMINATED = "terminated"


@dataclass
class Command:
    kind: str
    args: dict
    seq: int


@dataclass
class Channel:
    id: str
    owner_pid: str
    engine_class: EngineClass
    tsg_id: str
    state: ChannelState = ChannelState.IDLE
    pushbuffer: deque = field(default_factory=deque)
    inflight: Optional[Command] = None
    inflight_event: Optional[int] = None
    frozen_remaining_us: Optional[int] = None


@dataclass
class Tsg:
    id: str
    kind: TsgKind
    channel_ids: list[str] = field(default_factory=list)
    state: TsgState = TsgState.ACTIVE
    blocked_since: Optional[int] = None


@dataclass
class Client:
    pid: str
    mode: str  # "mps-client" | "standalone"
    context_id: str
    channel_ids: dict = field(default_factory=dict)  # EngineClass -> channel id
    state: ClientState = ClientState.RUNNING
    terminate_reason: Optional[str] = None
    error_notifier: Optional[str] = None
    workload: Optional[object] = None


@dataclass
class MpsSession:
    server_context: str
    client_pids: list[str] = field(default_factory=list)
    gr_tsg: str = ""


class Scheduler:
    """Round-robin rotation over active TSGs.

    A stalled or preempted TSG is skipped until it resumes. Within one slice,
    pending commands from all of the current TSG's runnable channels dispatch
    at the same timestamp, ordered by channel id.
    """

    def __init__(self, time_slice_us: int):
        self.ring: list[str] = []
        self.cursor = 0
        self.time_slice_us = time_slice_us

    def add(self, tsg_id: str):
        self.ring.append(tsg_id)

    def remove(self, tsg_id: str):
        if tsg_id in self.ring:
            idx = self.ring.index(tsg_id)
            self.ring.remove(tsg_id)
            if idx < self.cursor:
                self.cursor -= 1
            if self.ring:
                self.cursor %= len(self.ring)
            else:
                self.cursor = 0


class GpuModel:
    """All scheduling structures of one GPU plus their bookkeeping counters."""

    def __init__(self, params):
        self.scheduler = Scheduler(params.time_slice_us)
        self.tsgs: dict[str, Tsg] = {}
        self.channels: dict[str, Channel] = {}
        self.clients: dict[str, Client] = {}
        self.mps_session: Optional[MpsSession] = None
        self.channels_created = 0
        self.channels_torn_down = 0
        self._next_tsg = 1
        self._next_ctx = 1
        self._next_pid = 1
        self._next_cmd_seq = 1

    # -- construction -------------------------------------------------------

    def new_tsg(self, world, kind: TsgKind) -> Tsg:
        tsg_id = "gr" if kind is TsgKind.SHARED_GR else f"tsg{self._next_tsg}"
        self._next_tsg += 1
        tsg = Tsg(id=tsg_id, kind=kind)
        self.tsgs[tsg_id] = tsg
        self.scheduler.add(tsg_id)
        world.trace.emit(world.clock.now, tsg_id, "tsg_create", tsg_kind=kind.value)
        return tsg

    def create_mps_session(self, world) -> MpsSession:
        if self.mps_session is not None:
            return self.mps_session
        ctx = f"ctx{self._next_ctx}"
        self._next_ctx += 1
        gr = self.new_tsg(world, TsgKind.SHARED_GR)
        self.mps_session = MpsSession(server_context=ctx, gr_tsg=gr.id)
        world.trace.emit(world.clock.now, "mps", "session_create", context=ctx, gr_tsg=gr.id)
        return self.mps_session

    def create_client(self, world, mode: str) -> Client:
        """Wire a new client's channels into TSGs per the MPS sharing policy."""
        if mode == "mps-client" and self.mps_session is None:
            raise NoMpsSession("create an MPS session before adding MPS clients")
        pid = f"c{self._next_pid}"
        self._next_pid += 1
        if mode == "mps-client":
            ctx = self.mps_session.server_context
            gr = self.tsgs[self.mps_session.gr_tsg]
            ce_tsg = self.new_tsg(world, TsgKind.PER_CLIENT_CE)
            homes = {
                EngineClass.SM: gr,
                EngineClass.PBDMA: gr,
                EngineClass.CE: ce_tsg,
            }
            self.mps_session.client_pids.append(pid)
        else:
            ctx = f"ctx{self._next_ctx}"
            self._next_ctx += 1
            own = self.new_tsg(world, TsgKind.STANDALONE)
            homes = {
                EngineClass.SM: own,
                EngineClass.PBDMA: own,
                EngineClass.CE: own,
            }
        client = Client(pid=pid, mode=mode, context_id=ctx)
        for engine, tsg in homes.items():
            ch_id = f"{pid}.{engine.value}"
            ch = Channel(id=ch_id, owner_pid=pid, engine_class=engine, tsg_id=tsg.id)
            self.channels[ch_id] = ch
            tsg.channel_ids.append(ch_id)
            client.channel_ids[engine] = ch_id
            self.channels_created += 1
        self.clients[pid] = client
        world.trace.emit(
            world.clock.now, pid, "client_create", mode=mode, context=ctx,
            sm=client.channel_ids[EngineClass.SM],
            ce=client.channel_ids[EngineClass.CE],
            pbdma=client.channel_ids[EngineClass.PBDMA],
        )
        return client

    # -- command flow -------------------------------------------------------

    def enqueue(self, world, channel_id: str, kind: str, **args) -> Command:
        ch = self.channels[channel_id]
        cmd = Command(kind=kind, args=args, seq=self._next_cmd_seq)
        self._next_cmd_seq += 1
        ch.pushbuffer.append(cmd)
        return cmd

    def _dispatchable(self, ch: Channel) -> bool:
        return ch.state is ChannelState.IDLE and bool(ch.pushbuffer)

    def _tsg_has_work(self, tsg: Tsg) -> bool:
        if tsg.state is not TsgState.ACTIVE:
            return False
        return any(self._dispatchable(self.channels[cid]) for cid in tsg.channel_ids)

    def dispatch_slice(self, world) -> list[Command]:
        """Give the next active TSG one slice; dispatch all its pending commands.

        With no active TSG this is an idle slice: nothing dispatches and the
        clock advances by one time slice (as a scheduled tick).
        """
        sched = self.scheduler
        n = len(sched.ring)
        for probe in range(n):
            idx = (sched.cursor + probe) % n
            tsg = self.tsgs[sched.ring[idx]]
            if self._tsg_has_work(tsg):
                sched.cursor = (idx + 1) % n
                dispatched = []
                for cid in sorted(tsg.channel_ids):
                    ch = self.channels[cid]
                    if self._dispatchable(ch):
                        cmd = ch.pushbuffer.popleft()
                        ch.state = ChannelState.RUNNING
                        ch.inflight = cmd
                        world.trace.emit(
                            world.clock.now, cid, "dispatch",
                            cmd=cmd.kind, cmd_seq=cmd.seq, tsg=tsg.id,
                        )
                        dispatched.append(cmd)
                        world.execute_command(world, ch, cmd)
                return dispatched
        world.trace.emit(world.clock.now, "sched", "idle_slice")
        world.schedule(sched.time_slice_us, "sched", "slice_tick")
        return []

    def pump(self, world):
        """Dispatch eagerly until no active TSG has pending commands.

        The slice length never gates progress; it only orders rotation. That
        keeps workload timing a pure function of configured latencies.
        """
        while any(self._tsg_has_work(t) for t in self.tsgs.values()):
            self.dispatch_slice(world)

    def complete_command(self, world, channel_id: str):
        ch = self.channels.get(channel_id)
        if ch is None or ch.state is ChannelState.TORN_DOWN:
            return None
        cmd = ch.inflight
        ch.inflight = None
        ch.inflight_event = None
        if ch.state is ChannelState.RUNNING:
            ch.state = ChannelState.IDLE
        world.trace.emit(world.clock.now, channel_id, "cmd_complete",
                         cmd=cmd.kind, cmd_seq=cmd.seq)
        return cmd

    # -- fault-window state -------------------------------------------------

    def _freeze_channels(self, world, tsg: Tsg, blocked_state: ChannelState):
        # Execution is suspended: in-flight completions are unscheduled and
        # their remaining time is stashed so resume can restore them exactly.
        for cid in tsg.channel_ids:
            ch = self.channels[cid]
            if ch.state is ChannelState.RUNNING:
                ch.state = blocked_state
            if ch.inflight_event is not None:
                remaining = world.event_fire_at(ch.inflight_event) - world.clock.now
                world.cancel(ch.inflight_event)
                ch.inflight_event = None
                ch.frozen_remaining_us = remaining

    def stall_tsg(self, world, tsg_id: str):
        """Fault-and-stall: block the whole TSG until the fault resolves."""
        tsg = self.tsgs[tsg_id]
        tsg.state = TsgState.STALLED
        tsg.blocked_since = world.clock.now
        self._freeze_channels(world, tsg, ChannelState.STALLED)
        world.trace.emit(world.clock.now, tsg_id, "tsg_stall")

    def preempt_tsg(self, world, tsg_id: str):
        """Fault-and-switch: the TSG is switched out, other TSGs keep running."""
        tsg = self.tsgs[tsg_id]
        tsg.state = TsgState.PREEMPTED
        tsg.blocked_since = world.clock.now
        self._freeze_channels(world, tsg, ChannelState.PREEMPTED)
        world.trace.emit(world.clock.now, tsg_id, "tsg_preempt")

    def resume_tsg(self, world, tsg_id: str):
        """Unblock a TSG; in-flight work is pushed out by the blocked window."""
        tsg = self.tsgs.get(tsg_id)
        if tsg is None or tsg.state in (TsgState.ACTIVE, TsgState.DESTROYED):
            return
        window = world.clock.now - tsg.blocked_since
        tsg.state = TsgState.ACTIVE
        tsg.blocked_since = None
        for cid in tsg.channel_ids:
            ch = self.channels[cid]
            if ch.state in (ChannelState.STALLED, ChannelState.PREEMPTED):
                ch.state = ChannelState.RUNNING if ch.inflight else ChannelState.IDLE
            if ch.frozen_remaining_us is not None:
                ch.inflight_event = world.schedule(
                    ch.frozen_remaining_us, ch.id, "cmd_complete"
                )
                ch.frozen_remaining_us = None
        world.trace.emit(world.clock.now, tsg_id, "tsg_resume", window_us=window)

    # -- teardown -----------------------------------------------------------

    def teardown_channel(self, world, channel_id: str):
        ch = self.channels[channel_id]
        if ch.state is ChannelState.TORN_DOWN:
            return
        if ch.inflight_event is not None:
            world.cancel(ch.inflight_event)
        ch.inflight = None
        ch.inflight_event = None
        ch.frozen_remaining_us = None
        ch.pushbuffer.clear()
        ch.state = ChannelState.TORN_DOWN
        tsg = self.tsgs[ch.tsg_id]
        if channel_id in tsg.channel_ids:
            tsg.channel_ids.remove(channel_id)
        self.channels_torn_down += 1
        world.trace.emit(world.clock.now, channel_id, "channel_teardown")

    def teardown_tsg(self, world, tsg_id: str, reason: str) -> list[str]:
        """Tear down every channel in the TSG; returns the distinct owner pids.

        Tearing down the shared GR TSG destroys the shared CUDA context, which
        terminates every MPS client. A standalone TSG destroys its owner's
        context. A per-client CE TSG leaves the shared context intact.
        """
        tsg = self.tsgs.get(tsg_id)
        if tsg is None or tsg.state is TsgState.DESTROYED:
            raise UnknownTsg(f"no live TSG {tsg_id}")
        owners: list[str] = []
        for cid in list(tsg.channel_ids):
            ch = self.channels[cid]
            if ch.owner_pid not in owners:
                owners.append(ch.owner_pid)
            self.teardown_channel(world, cid)
        tsg.state = TsgState.DESTROYED
        self.scheduler.remove(tsg_id)
        world.trace.emit(world.clock.now, tsg_id, "tsg_teardown", reason=reason)
        context_destroyed = tsg.kind in (TsgKind.SHARED_GR, TsgKind.STANDALONE)
        if context_destroyed:
            if tsg.kind is TsgKind.SHARED_GR:
                doomed = list(self.mps_session.client_pids)
            else:
                doomed = [p for p in owners if self.clients[p].state is ClientState.RUNNING]
            for pid in doomed:
                client = self.clients[pid]
                if client.state is ClientState.RUNNING:
                    world.terminate_client(world, pid, "fault-propagation")
        return owners

    # -- views --------------------------------------------------------------

    def client_channel(self, pid: str, engine: EngineClass) -> Channel:
        return self.channels[self.clients[pid].channel_ids[engine]]

    def live_channel_count(self) -> int:
        return sum(len(t.channel_ids) for t in self.tsgs.values())
