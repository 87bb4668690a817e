"""Execution hierarchy: TSG wiring, slicing, teardown blast radius."""

import pytest

from mpssim import machine
from mpssim.errors import NoMpsSession, UnknownTsg
from mpssim.execmodel import ChannelState, ClientState, EngineClass, TsgKind, TsgState
from mpssim.kernel import SimParams


def world_with_session():
    w = machine.build_world(SimParams())
    w.gpu.create_mps_session(w)
    return w


def test_mps_clients_share_the_gr_tsg_for_sm_and_pbdma():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    b = machine.create_client(w, "mps-client")
    gr = w.gpu.mps_session.gr_tsg
    for pid in (a.pid, b.pid):
        assert w.gpu.client_channel(pid, EngineClass.SM).tsg_id == gr
        assert w.gpu.client_channel(pid, EngineClass.PBDMA).tsg_id == gr


def test_mps_clients_have_private_ce_tsgs():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    b = machine.create_client(w, "mps-client")
    ce_a = w.gpu.client_channel(a.pid, EngineClass.CE).tsg_id
    ce_b = w.gpu.client_channel(b.pid, EngineClass.CE).tsg_id
    assert ce_a != ce_b
    assert w.gpu.tsgs[ce_a].kind is TsgKind.PER_CLIENT_CE


def test_standalone_client_gets_a_disjoint_tsg():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    s = machine.create_client(w, "standalone")
    own = {w.gpu.client_channel(s.pid, e).tsg_id for e in EngineClass}
    assert len(own) == 1
    tsg = own.pop()
    assert w.gpu.tsgs[tsg].kind is TsgKind.STANDALONE
    a_tsgs = {w.gpu.client_channel(a.pid, e).tsg_id for e in EngineClass}
    assert tsg not in a_tsgs


def test_mps_client_requires_session():
    w = machine.build_world(SimParams())
    with pytest.raises(NoMpsSession):
        machine.create_client(w, "mps-client")


def test_shared_context_for_all_mps_clients():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    b = machine.create_client(w, "mps-client")
    assert a.context_id == b.context_id == w.gpu.mps_session.server_context


def test_same_slice_dispatches_multiple_clients_channels():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    b = machine.create_client(w, "mps-client")
    w.gpu.enqueue(w, a.channel_ids[EngineClass.SM], "compute", duration_us=10)
    w.gpu.enqueue(w, b.channel_ids[EngineClass.SM], "compute", duration_us=10)
    dispatched = w.gpu.dispatch_slice(w)
    assert len(dispatched) == 2


def test_all_tsgs_blocked_is_an_idle_slice():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    w.gpu.enqueue(w, a.channel_ids[EngineClass.SM], "compute", duration_us=10)
    for tsg_id in list(w.gpu.tsgs):
        w.gpu.preempt_tsg(w, tsg_id)
    dispatched = w.gpu.dispatch_slice(w)
    assert dispatched == []
    assert "kind=idle_slice" in w.trace.render()


def test_round_robin_alternates_between_tsgs():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    s = machine.create_client(w, "standalone")
    # Two pending commands on each; consecutive slices serve different TSGs.
    for _ in range(2):
        w.gpu.enqueue(w, a.channel_ids[EngineClass.SM], "compute", duration_us=99)
        w.gpu.enqueue(w, s.channel_ids[EngineClass.SM], "compute", duration_us=99)
    first = w.gpu.dispatch_slice(w)[0]
    second = w.gpu.dispatch_slice(w)[0]
    owners = {w.gpu.channels[a.channel_ids[EngineClass.SM]].owner_pid,
              w.gpu.channels[s.channel_ids[EngineClass.SM]].owner_pid}
    assert {a.pid, s.pid} == owners
    assert first is not second


def test_gr_teardown_terminates_exactly_the_mps_clients():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    b = machine.create_client(w, "mps-client")
    s = machine.create_client(w, "standalone")
    owners = w.gpu.teardown_tsg(w, w.gpu.mps_session.gr_tsg, "test")
    assert sorted(owners) == sorted([a.pid, b.pid])
    assert a.state is ClientState.TERMINATED
    assert b.state is ClientState.TERMINATED
    assert s.state is ClientState.RUNNING


def test_ce_tsg_teardown_returns_only_the_owner_and_spares_the_context():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    b = machine.create_client(w, "mps-client")
    ce_tsg = w.gpu.client_channel(a.pid, EngineClass.CE).tsg_id
    owners = w.gpu.teardown_tsg(w, ce_tsg, "test")
    assert owners == [a.pid]
    # The shared context survives, so nobody is terminated by this teardown.
    assert a.state is ClientState.RUNNING
    assert b.state is ClientState.RUNNING


def test_teardown_of_unknown_or_destroyed_tsg_raises():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    ce = w.gpu.client_channel(a.pid, EngineClass.CE).tsg_id
    w.gpu.teardown_tsg(w, ce, "test")
    with pytest.raises(UnknownTsg):
        w.gpu.teardown_tsg(w, ce, "again")
    with pytest.raises(UnknownTsg):
        w.gpu.teardown_tsg(w, "tsg999", "never")


def test_torn_down_channels_never_run_again():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    sm = a.channel_ids[EngineClass.SM]
    w.gpu.teardown_channel(w, sm)
    assert w.gpu.channels[sm].state is ChannelState.TORN_DOWN
    w.gpu.enqueue(w, sm, "compute", duration_us=5)
    # Commands queued on a dead channel are unreachable garbage; clearing on
    # teardown means nothing dispatches from it.
    assert w.gpu.dispatch_slice(w) == []
    assert w.gpu.channels[sm].state is ChannelState.TORN_DOWN


def test_channel_conservation():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    b = machine.create_client(w, "mps-client")
    s = machine.create_client(w, "standalone")
    assert w.gpu.live_channel_count() == w.gpu.channels_created
    w.gpu.teardown_tsg(w, w.gpu.mps_session.gr_tsg, "test")
    assert w.gpu.live_channel_count() == (
        w.gpu.channels_created - w.gpu.channels_torn_down
    )


def test_stall_and_resume_shift_inflight_completion_by_the_window():
    w = world_with_session()
    a = machine.create_client(w, "mps-client")
    sm = a.channel_ids[EngineClass.SM]
    w.gpu.enqueue(w, sm, "compute", duration_us=1000)
    done = []
    orig = machine._channel_handler

    def spy(world, ev):
        orig(world, ev)
        if ev.kind == "cmd_complete":
            done.append(world.clock.now)

    w.register(sm, spy)
    gr = w.gpu.mps_session.gr_tsg
    w.register("t", lambda world, ev: world.gpu.stall_tsg(world, gr))
    w.register("r", lambda world, ev: world.gpu.resume_tsg(world, gr))
    w.schedule(300, "t", "stall")
    w.schedule(800, "r", "resume")
    w.run_until_quiescent()
    # 1000 us of work, frozen from 300 to 800: completes at 1500.
    assert done == [1500]
