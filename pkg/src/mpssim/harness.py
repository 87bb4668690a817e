"""Scenario files, runners, and reports.

A scenario is a line-oriented text file with a mandatory schema version.
Unknown directives are errors, not warnings; golden scenarios must not drift
silently. Every runner produces an ordered verdict map (string -> string) and
a set of named artifacts (traces and rendered reports); expectation checking
is exact string equality against the verdict map.

Reports are pure functions of traces: re-rendering a stored trace reproduces
the report byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields as dc_fields
from importlib import resources
from typing import Optional

from . import faults as faults_mod
from . import machine, recovery
from .errors import AuditViolation, ParseError
from .kernel import SimParams, parse_trace_text
from .workload import RequestSpec, WorkloadSpec

BUNDLED = [
    "table3",
    "table4",
    "fig3-isolation-throughput",
    "fig6-recovery-sweeps",
    "fig8-sync-overhead",
    "reachability-audit",
]

_KINDS = {
    "single", "containment", "recovery_coverage", "isolation_trace",
    "recovery_sweep", "sync_sweep", "audit",
}

_WORKLOADS = {"injector", "victim", "serving", "idle"}


@dataclass
class ClientDecl:
    name: str
    mode: str  # "mps" | "standalone"
    workload: str
    options: dict = field(default_factory=dict)


@dataclass
class PairDecl:
    active: str
    standby: str
    n: int = 16
    weight_pages: int = 64
    kv_blocks: int = 64


@dataclass
class InjectDecl:
    time_us: int
    client: str
    trigger: str


@dataclass
class Scenario:
    name: str = ""
    kind: str = "single"
    seed: int = 0
    params: dict = field(default_factory=dict)
    clients: list = field(default_factory=list)
    pair: Optional[PairDecl] = None
    requests: list = field(default_factory=list)  # (client, RequestSpec)
    injections: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    inject_time: int = 12_000
    inject_progress: Optional[int] = None
    injector: Optional[str] = None
    watch: Optional[str] = None
    isolation: bool = True
    depth: int = 3
    sweep_k: list = field(default_factory=list)
    sweep_n: list = field(default_factory=list)
    sweep_max_new: int = 132
    equality_k: list = field(default_factory=list)
    equality_max_new: int = 1040
    equality_n: int = 16
    serve_prompt_len: int = 6
    sync_tokens: int = 256
    fault: Optional[str] = None
    expectations: list = field(default_factory=list)  # (key, value)


def _parse_int_list(tokens: list[str], line: int) -> list[int]:
    out = []
    for tok in tokens:
        if ".." in tok:
            lo, _, hi = tok.partition("..")
            try:
                out.extend(range(int(lo), int(hi) + 1))
            except ValueError:
                raise ParseError(f"bad range {tok!r}", line)
        else:
            try:
                out.append(int(tok))
            except ValueError:
                raise ParseError(f"bad integer {tok!r}", line)
    return out


def _parse_kv(tokens: list[str], line: int) -> dict:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(f"expected key=value, got {tok!r}", line)
        k, _, v = tok.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            out[k] = v
    return out


def parse_scenario(text: str) -> Scenario:
    scn = Scenario()
    declared: set[str] = set()
    saw_version = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        key, args = tokens[0], tokens[1:]
        if not saw_version:
            if key != "version" or args != ["1"]:
                raise ParseError("first directive must be 'version 1'", lineno)
            saw_version = True
            continue
        if key == "name":
            scn.name = args[0]
        elif key == "kind":
            if args[0] not in _KINDS:
                raise ParseError(f"unknown kind {args[0]!r}", lineno)
            scn.kind = args[0]
        elif key == "seed":
            scn.seed = _parse_int_list(args, lineno)[0]
        elif key == "param":
            if len(args) != 2:
                raise ParseError("param takes a key and an integer", lineno)
            valid = {f.name for f in dc_fields(SimParams)}
            if args[0] not in valid:
                raise ParseError(f"unknown param {args[0]!r}", lineno)
            scn.params[args[0]] = int(args[1])
        elif key == "client":
            if len(args) < 3:
                raise ParseError("client takes: name mps|standalone workload", lineno)
            name, mode, wl = args[0], args[1], args[2]
            if mode not in ("mps", "standalone"):
                raise ParseError(f"bad client mode {mode!r}", lineno)
            if wl not in _WORKLOADS:
                raise ParseError(f"unknown workload {wl!r}", lineno)
            scn.clients.append(ClientDecl(name, mode, wl, _parse_kv(args[3:], lineno)))
            declared.add(name)
        elif key == "pair":
            if len(args) < 2:
                raise ParseError("pair takes: active standby [k=v ...]", lineno)
            opts = _parse_kv(args[2:], lineno)
            scn.pair = PairDecl(args[0], args[1],
                                n=opts.get("n", 16),
                                weight_pages=opts.get("weight_pages", 64),
                                kv_blocks=opts.get("kv_blocks", 64))
            declared.add(args[0])
            declared.add(args[1])
        elif key == "request":
            if len(args) != 4:
                raise ParseError("request takes: client arrival prompt_len max_new", lineno)
            if args[0] not in declared:
                raise ParseError(f"request references undeclared client {args[0]!r}", lineno)
            arrival, plen, mnew = (int(a) for a in args[1:])
            if arrival < 0:
                raise ParseError("arrival time must be >= 0", lineno)
            rid = f"r{len(scn.requests) + 1}"
            scn.requests.append((args[0], RequestSpec(rid, arrival, plen, mnew)))
        elif key == "inject":
            if len(args) != 3:
                raise ParseError("inject takes: time client trigger", lineno)
            t = int(args[0])
            if t < 0:
                raise ParseError("injection time must be >= 0", lineno)
            if args[1] not in declared:
                raise ParseError(f"inject references undeclared client {args[1]!r}", lineno)
            scn.injections.append(InjectDecl(t, args[1], args[2]))
        elif key == "faults":
            scn.faults = list(args)
        elif key == "inject_time":
            scn.inject_time = int(args[0])
        elif key == "inject_progress":
            scn.inject_progress = int(args[0])
        elif key == "injector":
            if args[0] not in declared:
                raise ParseError(f"injector references undeclared client {args[0]!r}", lineno)
            scn.injector = args[0]
        elif key == "watch":
            if args[0] not in declared:
                raise ParseError(f"watch references undeclared client {args[0]!r}", lineno)
            scn.watch = args[0]
        elif key == "isolation":
            if args[0] not in ("on", "off"):
                raise ParseError("isolation takes on|off", lineno)
            scn.isolation = args[0] == "on"
        elif key == "depth":
            scn.depth = int(args[0])
        elif key == "sweep_k":
            scn.sweep_k = _parse_int_list(args, lineno)
        elif key == "sweep_n":
            scn.sweep_n = _parse_int_list(args, lineno)
        elif key == "sweep_max_new":
            scn.sweep_max_new = int(args[0])
        elif key == "equality_k":
            scn.equality_k = _parse_int_list(args, lineno)
        elif key == "equality_max_new":
            scn.equality_max_new = int(args[0])
        elif key == "equality_n":
            scn.equality_n = int(args[0])
        elif key == "serve_prompt_len":
            scn.serve_prompt_len = int(args[0])
        elif key == "sync_tokens":
            scn.sync_tokens = int(args[0])
        elif key == "fault":
            scn.fault = args[0]
        elif key == "expect":
            if len(args) < 2:
                raise ParseError("expect takes: key value...", lineno)
            scn.expectations.append((args[0], " ".join(args[1:])))
        else:
            raise ParseError(f"unknown directive {key!r}", lineno)
    if not saw_version:
        raise ParseError("empty scenario: missing 'version 1'", 1)
    return scn


def load_bundled(name: str) -> str:
    path = resources.files("mpssim") / "scenarios" / f"{name}.scenario"
    return path.read_text()


# -- world construction -------------------------------------------------------

def make_params(scn: Scenario, overrides: Optional[dict] = None,
                seed: Optional[int] = None) -> SimParams:
    kw = dict(scn.params)
    if overrides:
        kw.update(overrides)
    kw["seed"] = seed if seed is not None else kw.get("seed", scn.seed)
    return SimParams(**kw)


def _workload_spec(decl: ClientDecl) -> WorkloadSpec:
    return WorkloadSpec(
        kind=decl.workload,
        iterations=decl.options.get("iterations", 6),
        weight_pages=decl.options.get("weight_pages", 64),
        kv_blocks=decl.options.get("kv_blocks", 64),
        options=decl.options,
    )


def build_base_world(scn: Scenario, params: SimParams, isolation: bool,
                     with_injections: bool = True):
    """Instantiate the declared clients, pair, requests, and injections."""
    world = machine.build_world(params)
    world.uvm.isolation_enabled = isolation
    names: dict[str, str] = {}
    needs_mps = scn.pair is not None or any(c.mode == "mps" for c in scn.clients)
    if needs_mps:
        world.gpu.create_mps_session(world)
    for decl in scn.clients:
        mode = "mps-client" if decl.mode == "mps" else "standalone"
        client = machine.create_client(world, mode)
        names[decl.name] = client.pid
        spec = _workload_spec(decl)
        if decl.workload == "victim":
            machine.attach_victim(world, client, spec).start(world)
        elif decl.workload == "injector":
            machine.attach_injector(world, client, spec)
        elif decl.workload == "serving":
            machine.attach_serving(world, client, spec, service=decl.name)
        else:
            machine.attach_injector(world, client, spec)
    if scn.pair is not None:
        spec = WorkloadSpec(kind="serving",
                            weight_pages=scn.pair.weight_pages,
                            kv_blocks=scn.pair.kv_blocks)
        active, standby = recovery.deploy_pair(world, spec, scn.pair.n,
                                               service=scn.pair.active)
        names[scn.pair.active] = active
        names[scn.pair.standby] = standby
    for client_name, rspec in scn.requests:
        machine.schedule_request(world, client_name, rspec)
    if with_injections:
        for inj in scn.injections:
            world.schedule(inj.time_us, names[inj.client], "inject",
                           trigger=inj.trigger)
    world.name_to_pid = names
    return world


# -- trace-derived views --------------------------------------------------------

def victim_status(trace_text: str, pid: str) -> str:
    status = "ALIVE"
    for rec in parse_trace_text(trace_text):
        if rec["kind"] == "victim_report" and rec["who"] == pid:
            status = rec["status"]
    return status


def client_final_state(trace_text: str, pid: str) -> dict:
    out = {"state": "running", "reason": "-", "notifier": "-"}
    for rec in parse_trace_text(trace_text):
        if rec["kind"] == "client_final" and rec["who"] == pid:
            out = {"state": rec["state"], "reason": rec["reason"],
                   "notifier": rec["notifier"]}
    return out


def token_stream(trace_text: str, pid: str) -> list[tuple]:
    out = []
    for rec in parse_trace_text(trace_text):
        if rec["kind"] == "token" and rec["who"] == pid:
            out.append((rec["req"], int(rec["idx"]), int(rec["tok"]), rec["t"]))
    return out


def compare_serving_traces(base_trace: str, fault_trace: str, pid: str,
                           expected_shift: int) -> str:
    """Check the one-stall property: same tokens, one time discontinuity of
    exactly the handling latency."""
    base = token_stream(base_trace, pid)
    faulted = token_stream(fault_trace, pid)
    if [x[:3] for x in base] != [x[:3] for x in faulted]:
        return "PAYLOAD_DIFFERS"
    deltas = [f[3] - b[3] for b, f in zip(base, faulted)]
    boundaries = 0
    prev = 0
    for d in deltas:
        if d != prev:
            boundaries += 1
            prev = d
        if d not in (0, expected_shift):
            return f"BAD_SHIFT({d})"
    if boundaries == 0:
        return "ZERO_STALL"
    if boundaries == 1 and deltas[-1] == expected_shift:
        return "ONE_STALL_EXACT"
    return f"MULTIPLE_WINDOWS({boundaries})"


def first_fault_time(trace_text: str) -> Optional[int]:
    for rec in parse_trace_text(trace_text):
        if rec["kind"] == "fault_raised":
            return rec["t"]
    return None


# -- run report rendering --------------------------------------------------------

def render_run_report(trace_text: str) -> str:
    """Human-readable summary; a pure function of the trace."""
    modes: dict[str, str] = {}
    finals: dict[str, dict] = {}
    victims: dict[str, tuple] = {}
    tokens: dict[str, int] = {}
    done: dict[str, int] = {}
    recoveries: list[dict] = []
    end_time = 0
    events = 0
    for rec in parse_trace_text(trace_text):
        kind = rec["kind"]
        if kind == "client_create":
            modes[rec["who"]] = rec["mode"]
        elif kind == "client_final":
            finals[rec["who"]] = rec
        elif kind == "victim_report":
            victims[rec["who"]] = (rec["status"], rec["iterations"])
        elif kind == "token":
            tokens[rec["who"]] = tokens.get(rec["who"], 0) + 1
        elif kind == "request_done":
            done[rec["who"]] = done.get(rec["who"], 0) + 1
        elif kind == "recovery_done":
            recoveries.append(rec)
        elif kind == "run_end":
            end_time = rec["t"]
            events = int(rec["events"])
    lines = [f"run report end_us={end_time} events={events}"]
    for pid in sorted(finals):
        f = finals[pid]
        lines.append(
            f"client {pid} mode={modes.get(pid, '-')} state={f['state']} "
            f"reason={f['reason']} notifier={f['notifier']}"
        )
    for pid in sorted(victims):
        status, iters = victims[pid]
        lines.append(f"victim {pid} status={status} iterations={iters}")
    for pid in sorted(set(tokens) | set(done)):
        lines.append(f"serving {pid} tokens={tokens.get(pid, 0)} "
                     f"requests_done={done.get(pid, 0)}")
    for rec in recoveries:
        lines.append(
            f"recovery {rec['who']} outage_us={rec['outage_us']} "
            f"replayed={rec['replayed']} degraded={rec['degraded']}"
        )
    return "\n".join(lines) + "\n"


# -- scenario runners -------------------------------------------------------------

@dataclass
class ScenarioResult:
    name: str
    kind: str
    verdicts: dict
    expectations: list
    artifacts: dict
    passed: bool
    failures: list


def _finish(scn: Scenario, verdicts: dict, artifacts: dict) -> ScenarioResult:
    failures = []
    for key, want in scn.expectations:
        got = verdicts.get(key)
        if got != want:
            failures.append(f"{key}: expected {want!r}, got {got!r}")
    verdict_lines = [f"{k} {v}" for k, v in verdicts.items()]
    artifacts["verdicts.txt"] = "\n".join(verdict_lines) + "\n"
    artifacts["verdicts.json"] = json.dumps(verdicts, sort_keys=True) + "\n"
    return ScenarioResult(
        name=scn.name, kind=scn.kind, verdicts=verdicts,
        expectations=scn.expectations, artifacts=artifacts,
        passed=not failures, failures=failures,
    )


def _run_single(scn: Scenario, overrides, seed) -> ScenarioResult:
    params = make_params(scn, overrides, seed)
    world = build_base_world(scn, params, scn.isolation)
    report = world.run_until_quiescent()
    verdicts = {}
    for name, pid in world.name_to_pid.items():
        state = client_final_state(report.trace_text, pid)
        verdicts[name] = "DIED" if state["state"] == "terminated" else "ALIVE"
    artifacts = {
        "run.trace": report.trace_text,
        "run.report.txt": render_run_report(report.trace_text),
    }
    return _finish(scn, verdicts, artifacts)


def _run_containment(scn: Scenario, overrides, seed) -> ScenarioResult:
    """Each listed fault runs twice, isolation off then on; the victim's
    fate in each run fills one matrix row."""
    verdicts: dict[str, str] = {}
    artifacts: dict[str, str] = {}
    rows = []
    for trigger in scn.faults:
        info = faults_mod.SCENARIOS[faults_mod.TRIGGERS[trigger].expected_scenario]
        shared = "per-client" if info.propagates == "contained" else "yes"
        cells = {}
        for iso in (False, True):
            params = make_params(scn, overrides, seed)
            world = build_base_world(scn, params, iso, with_injections=False)
            world.schedule(scn.inject_time, world.name_to_pid[scn.injector],
                           "inject", trigger=trigger)
            report = world.run_until_quiescent()
            status = victim_status(report.trace_text,
                                   world.name_to_pid[scn.watch])
            cells[iso] = status
            artifacts[f"{trigger}.iso{int(iso)}.trace"] = report.trace_text
        verdicts[trigger] = f"{shared} {cells[False]} {cells[True]}"
        rows.append((info.num, trigger, shared, cells[False], cells[True]))
    table = ["containment matrix",
             f"{'#':>2} {'fault':<24} {'shared':<10} {'no_isolation':<12} isolation"]
    for num, trig, shared, off, on in rows:
        table.append(f"{num:>2} {trig:<24} {shared:<10} {off:<12} {on}")
    artifacts["matrix.txt"] = "\n".join(table) + "\n"
    artifacts["matrix.json"] = json.dumps(
        [{"num": r[0], "fault": r[1], "shared_tsg": r[2],
          "no_isolation": r[3], "isolation": r[4]} for r in rows],
        sort_keys=True) + "\n"
    return _finish(scn, verdicts, artifacts)


def _run_recovery_coverage(scn: Scenario, overrides, seed) -> ScenarioResult:
    """Every listed execution exception must kill the active instance and
    hand service to the standby."""
    verdicts: dict[str, str] = {}
    artifacts: dict[str, str] = {}
    for trigger in scn.faults:
        params = make_params(scn, overrides, seed)
        world = build_base_world(scn, params, True)
        active = world.name_to_pid[scn.pair.active]
        standby = world.name_to_pid[scn.pair.standby]
        injector = world.name_to_pid[scn.injector]
        engine = world.gpu.clients[active].workload
        rid = scn.requests[0][1].rid if scn.requests else "r1"
        engine.watchers.append({
            "rid": rid, "progress": scn.inject_progress or 8,
            "action": (lambda w, inj=injector, trg=trigger:
                       faults_mod.inject(w, inj, trg)),
        })
        report = world.run_until_quiescent()
        a = client_final_state(report.trace_text, active)
        s = client_final_state(report.trace_text, standby)
        active_v = "DIED" if a["state"] == "terminated" else "ALIVE"
        standby_v = "DIED" if s["state"] == "terminated" else "ALIVE"
        rec = world.recovery_reports[0] if world.recovery_reports else None
        takeover = "OK" if (rec is not None and rec.complete
                            and not rec.degraded) else "FAILED"
        verdicts[trigger] = f"{active_v} {standby_v} {takeover}"
        artifacts[f"{trigger}.trace"] = report.trace_text
    return _finish(scn, verdicts, artifacts)


def _run_isolation_trace(scn: Scenario, overrides, seed) -> ScenarioResult:
    """Serving victim, one fault: with isolation the token trace must show a
    single stall of exactly the handling latency; without it the victim dies
    at the injection point; with no fault the isolation build must be
    byte-identical to stock."""
    params = make_params(scn, overrides, seed)
    assert scn.injections, "isolation_trace needs one inject directive"
    inj = scn.injections[0]
    trigger_info = faults_mod.SCENARIOS[
        faults_mod.TRIGGERS[inj.trigger].expected_scenario]
    latency = params.mechanism_latency_us(trigger_info.mechanism)

    def run(isolation, with_fault):
        world = build_base_world(scn, params, isolation,
                                 with_injections=with_fault)
        report = world.run_until_quiescent()
        return world, report

    _, base_on = run(True, False)
    _, base_off = run(False, False)
    world_f_on, fault_on = run(True, True)
    world_f_off, fault_off = run(False, True)

    victim = world_f_on.name_to_pid[scn.watch] if scn.watch else \
        world_f_on.name_to_pid[[c.name for c in scn.clients
                                if c.workload == "serving"][0]]
    verdicts = {}
    zero = (base_on.trace_text == base_off.trace_text
            and "kind=isolate" not in base_on.trace_text)
    verdicts["no_fault_zero_overhead"] = "BYTE_IDENTICAL" if zero else "DIFFERS"
    verdicts["isolation_on"] = compare_serving_traces(
        base_on.trace_text, fault_on.trace_text, victim, latency)
    t_fault = first_fault_time(fault_off.trace_text)
    state = client_final_state(fault_off.trace_text, victim)
    late_tokens = [t for t in token_stream(fault_off.trace_text, victim)
                   if t[3] > t_fault]
    if state["state"] == "terminated" and not late_tokens:
        verdicts["isolation_off"] = "TERMINATED_AT_INJECTION"
    else:
        verdicts["isolation_off"] = "SURVIVED"
    artifacts = {
        "baseline.isolation_on.trace": base_on.trace_text,
        "baseline.isolation_off.trace": base_off.trace_text,
        "fault.isolation_on.trace": fault_on.trace_text,
        "fault.isolation_off.trace": fault_off.trace_text,
        "fault.isolation_on.report.txt": render_run_report(fault_on.trace_text),
    }
    return _finish(scn, verdicts, artifacts)


def _recovery_cell(scn: Scenario, overrides, seed, n, max_new, crash_k,
                   trigger) -> tuple:
    """One active/standby run that crashes after token `crash_k`."""
    params = make_params(scn, overrides, seed)
    world = machine.build_world(params)
    world.gpu.create_mps_session(world)
    injector = machine.create_client(world, "mps-client")
    machine.attach_injector(world, injector, WorkloadSpec(kind="injector"))
    spec = WorkloadSpec(kind="serving", weight_pages=scn.pair.weight_pages,
                        kv_blocks=scn.pair.kv_blocks)
    active, standby = recovery.deploy_pair(world, spec, n,
                                           service=scn.pair.active)
    machine.schedule_request(
        world, scn.pair.active,
        RequestSpec("r1", 0, scn.serve_prompt_len, max_new))
    if crash_k is not None:
        engine = world.gpu.clients[active].workload
        engine.watchers.append({
            "rid": "r1", "progress": crash_k,
            "action": (lambda w, inj=injector.pid, trg=trigger:
                       faults_mod.inject(w, inj, trg)),
        })
    report = world.run_until_quiescent()
    rec = world.recovery_reports[0] if world.recovery_reports else None
    return world, report, rec


def _run_recovery_sweep(scn: Scenario, overrides, seed) -> ScenarioResult:
    trigger = scn.fault or "sm.exc4.illegal_instruction"
    verdicts: dict[str, str] = {}
    artifacts: dict[str, str] = {}
    bound_rows = []
    bound_ok = True
    decomposition_ok = True
    n1_ok = True
    for n in scn.sweep_n:
        for k in scn.sweep_k:
            world, report, rec = _recovery_cell(
                scn, overrides, seed, n, scn.sweep_max_new, k, trigger)
            if rec is None or not rec.complete or rec.degraded:
                bound_ok = False
                bound_rows.append((n, k, -1, -1, "NO_RECOVERY"))
                continue
            params = world.params
            expected = (params.wake_warmup_us
                        + rec.replayed_steps * params.decode_step_us)
            if rec.replayed_steps > n:
                bound_ok = False
            if rec.outage_us != expected:
                decomposition_ok = False
            if n == 1 and rec.outage_us != params.wake_warmup_us:
                n1_ok = False
            bound_rows.append((n, k, rec.replayed_steps, rec.outage_us, "ok"))
    verdicts["replay_bound"] = "OK" if bound_ok else "VIOLATED"
    verdicts["outage_decomposition"] = "EXACT" if decomposition_ok else "OFF"
    if 1 in scn.sweep_n:
        verdicts["outage_n1"] = "EXACT" if n1_ok else "OFF"

    if scn.equality_k:
        _, base_report, _ = _recovery_cell(
            scn, overrides, seed, scn.equality_n, scn.equality_max_new,
            None, trigger)
        artifacts["equality.baseline.trace"] = base_report.trace_text
        eq_ok = True
        for k in scn.equality_k:
            _, crash_report, rec = _recovery_cell(
                scn, overrides, seed, scn.equality_n, scn.equality_max_new,
                k, trigger)
            verdict = recovery.verify_output_equality(
                crash_report.trace_text, base_report.trace_text)
            if not verdict.equal:
                eq_ok = False
                artifacts[f"equality.k{k}.mismatch.txt"] = repr(
                    verdict.mismatches) + "\n"
        verdicts["output_equality"] = "OK" if eq_ok else "MISMATCH"

    lines = ["recovery sweep",
             f"{'n':>4} {'k':>5} {'replayed':>8} {'outage_us':>10} note"]
    for n, k, rep, out, note in bound_rows:
        lines.append(f"{n:>4} {k:>5} {rep:>8} {out:>10} {note}")
    artifacts["sweep.txt"] = "\n".join(lines) + "\n"
    return _finish(scn, verdicts, artifacts)


def _run_sync_sweep(scn: Scenario, overrides, seed) -> ScenarioResult:
    """Fault-free pair runs across sync intervals; the modeled publish cost
    must fall as the interval grows."""
    verdicts: dict[str, str] = {}
    artifacts: dict[str, str] = {}
    rows = []
    for n in scn.sweep_n:
        world, report, _rec = _recovery_cell(
            scn, overrides, seed, n, scn.sync_tokens, None, None)
        publishes = sum(
            1 for rec in parse_trace_text(report.trace_text)
            if rec["kind"] == "snap_pub")
        tokens = sum(
            1 for rec in parse_trace_text(report.trace_text)
            if rec["kind"] == "token")
        sync_us = publishes * world.params.sync_latency_us
        busy_us = tokens * world.params.decode_step_us
        overhead_ppm = sync_us * 1_000_000 // (busy_us + sync_us)
        rows.append((n, publishes, sync_us, overhead_ppm))
    monotonic = all(rows[i][2] > rows[i + 1][2] for i in range(len(rows) - 1))
    verdicts["overhead_monotonic"] = "OK" if monotonic else "NOT_MONOTONIC"
    lines = ["sync overhead sweep",
             f"{'n':>4} {'publishes':>9} {'sync_us':>8} overhead_ppm"]
    for n, pubs, sync_us, ppm in rows:
        lines.append(f"{n:>4} {pubs:>9} {sync_us:>8} {ppm}")
    artifacts["sync.txt"] = "\n".join(lines) + "\n"
    return _finish(scn, verdicts, artifacts)


def _run_audit(scn: Scenario, overrides, seed) -> ScenarioResult:
    params = make_params(scn, overrides, seed)
    params = SimParams(**{**params.__dict__, "gpu_pages": 4096})
    verdicts: dict[str, str] = {}
    artifacts: dict[str, str] = {}
    try:
        report = faults_mod.reachability_audit(params, depth=scn.depth)
        verdicts["violations"] = "0"
        verdicts["sequences"] = str(report.sequences_run)
        artifacts["audit.txt"] = report.summary()
    except AuditViolation as exc:
        verdicts["violations"] = str(len(exc.report.violations))
        verdicts["sequences"] = str(exc.report.sequences_run)
        artifacts["audit.txt"] = exc.report.summary()
    return _finish(scn, verdicts, artifacts)


_RUNNERS = {
    "single": _run_single,
    "containment": _run_containment,
    "recovery_coverage": _run_recovery_coverage,
    "isolation_trace": _run_isolation_trace,
    "recovery_sweep": _run_recovery_sweep,
    "sync_sweep": _run_sync_sweep,
    "audit": _run_audit,
}


def run_scenario_text(text: str, overrides: Optional[dict] = None,
                      seed: Optional[int] = None,
                      force_isolation: Optional[bool] = None) -> ScenarioResult:
    scn = parse_scenario(text)
    if force_isolation is not None:
        scn.isolation = force_isolation
    return _RUNNERS[scn.kind](scn, overrides, seed)


def run_scenario_file(path: str, **kw) -> ScenarioResult:
    with open(path) as fh:
        return run_scenario_text(fh.read(), **kw)


def run_matrix(names_or_paths: list, overrides: Optional[dict] = None,
               seed: Optional[int] = None) -> tuple[str, str, bool]:
    """Run a suite of scenarios; returns (human table, json lines, all pass)."""
    rows = []
    all_pass = True
    for item in names_or_paths:
        if item in BUNDLED:
            result = run_scenario_text(load_bundled(item),
                                       overrides=overrides, seed=seed)
        else:
            result = run_scenario_file(item, overrides=overrides, seed=seed)
        all_pass = all_pass and result.passed
        rows.append(result)
    lines = ["suite summary", f"{'scenario':<28} {'kind':<18} result"]
    json_lines = []
    for r in rows:
        lines.append(f"{r.name:<28} {r.kind:<18} "
                     f"{'PASS' if r.passed else 'FAIL'}")
        json_lines.append(json.dumps(
            {"scenario": r.name, "kind": r.kind, "passed": r.passed,
             "verdicts": r.verdicts}, sort_keys=True))
    human = "\n".join(lines) + "\n"
    return human, "\n".join(json_lines) + ("\n" if json_lines else ""), all_pass
