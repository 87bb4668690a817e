"""Command-line entry points.

Exit codes: 0 all expectations met, 1 expectation failure, 2 parse or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import harness
from .errors import ParseError, SimError


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ParseError(f"--param expects k=v, got {item!r}")
        k, _, v = item.partition("=")
        out[k] = int(v)
    return out


def _write_artifacts(result, out_dir: str):
    base = os.path.join(out_dir, result.name or "scenario")
    os.makedirs(base, exist_ok=True)
    for name, text in result.artifacts.items():
        with open(os.path.join(base, name), "w") as fh:
            fh.write(text)


def _emit_result(result, args) -> int:
    if args.out:
        _write_artifacts(result, args.out)
    if args.json:
        print(json.dumps({
            "scenario": result.name, "kind": result.kind,
            "passed": result.passed, "verdicts": result.verdicts,
            "failures": result.failures,
        }, sort_keys=True))
    else:
        print(f"scenario {result.name} [{result.kind}]")
        for key, value in result.verdicts.items():
            print(f"  {key}: {value}")
        for failure in result.failures:
            print(f"  EXPECTATION FAILED {failure}")
        print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mpssim",
        description="Deterministic simulator of GPU sharing fault handling",
    )
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--param", action="append", metavar="K=V",
                        help="override one simulation parameter")
    parser.add_argument("--out", metavar="DIR",
                        help="write traces and reports under DIR")
    parser.add_argument("--no-isolation", action="store_true",
                        help="force the isolation path off")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario file")
    p_run.add_argument("scenario", help="path or bundled scenario name")

    p_matrix = sub.add_parser("matrix", help="run a scenario suite")
    p_matrix.add_argument("suite", nargs="*",
                          help="scenario paths, bundled names, or 'bundled'")

    sub.add_parser("audit", help="run the reachability audit")

    p_render = sub.add_parser("render", help="re-render a stored trace")
    p_render.add_argument("trace", help="trace file path")

    args = parser.parse_args(argv)
    try:
        overrides = _parse_overrides(args.param)
        force_iso = False if args.no_isolation else None
        if args.command == "run":
            if args.scenario in harness.BUNDLED:
                text = harness.load_bundled(args.scenario)
            else:
                with open(args.scenario) as fh:
                    text = fh.read()
            result = harness.run_scenario_text(
                text, overrides=overrides, seed=args.seed,
                force_isolation=force_iso)
            return _emit_result(result, args)
        if args.command == "matrix":
            suite = args.suite
            if suite == ["bundled"] or not suite:
                suite = list(harness.BUNDLED)
            human, json_lines, ok = harness.run_matrix(
                suite, overrides=overrides, seed=args.seed)
            print(json_lines if args.json else human, end="")
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                with open(os.path.join(args.out, "suite.txt"), "w") as fh:
                    fh.write(human)
                with open(os.path.join(args.out, "suite.jsonl"), "w") as fh:
                    fh.write(json_lines)
            return 0 if ok else 1
        if args.command == "audit":
            result = harness.run_scenario_text(
                harness.load_bundled("reachability-audit"),
                overrides=overrides, seed=args.seed)
            return _emit_result(result, args)
        if args.command == "render":
            with open(args.trace) as fh:
                print(harness.render_run_report(fh.read()), end="")
            return 0
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
