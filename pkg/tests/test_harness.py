"""Scenario parsing, runners, reports, and the command-line surface."""

import json

import pytest

from mpssim import cli, harness
from mpssim.errors import ParseError

GOOD = """\
version 1
name demo
kind single
seed 7
client INJ mps injector
client VIC mps victim iterations=3
inject 6000 INJ mmu.oob.sm
expect INJ DIED
expect VIC ALIVE
"""


def test_parse_round_trip_of_a_full_scenario():
    scn = harness.parse_scenario(GOOD)
    assert scn.name == "demo"
    assert scn.kind == "single"
    assert scn.seed == 7
    assert [c.name for c in scn.clients] == ["INJ", "VIC"]
    assert scn.clients[1].options == {"iterations": 3}
    assert scn.injections[0].trigger == "mmu.oob.sm"
    assert scn.expectations == [("INJ", "DIED"), ("VIC", "ALIVE")]


def test_version_must_come_first():
    with pytest.raises(ParseError) as exc:
        harness.parse_scenario("name x\nversion 1\n")
    assert exc.value.line == 1


def test_unknown_directive_is_an_error_with_line_number():
    with pytest.raises(ParseError) as exc:
        harness.parse_scenario("version 1\nname x\nfrobnicate 3\n")
    assert exc.value.line == 3


def test_unknown_param_is_an_error():
    with pytest.raises(ParseError):
        harness.parse_scenario("version 1\nparam not_a_knob 5\n")


def test_undeclared_client_references_are_errors():
    with pytest.raises(ParseError):
        harness.parse_scenario("version 1\ninject 0 GHOST mmu.oob.sm\n")
    with pytest.raises(ParseError):
        harness.parse_scenario("version 1\nrequest GHOST 0 6 8\n")
    with pytest.raises(ParseError):
        harness.parse_scenario("version 1\nwatch GHOST\n")


def test_negative_times_are_rejected():
    bad = "version 1\nclient A mps injector\ninject -5 A mmu.oob.sm\n"
    with pytest.raises(ParseError):
        harness.parse_scenario(bad)


def test_single_scenario_runs_with_exact_verdicts():
    result = harness.run_scenario_text(GOOD)
    assert result.verdicts == {"INJ": "DIED", "VIC": "ALIVE"}
    assert result.passed


def test_expectation_mismatch_fails_the_scenario():
    text = GOOD.replace("expect VIC ALIVE", "expect VIC DIED")
    result = harness.run_scenario_text(text)
    assert not result.passed
    assert "VIC" in result.failures[0]


def test_reports_re_render_identically_from_stored_traces(tmp_path):
    result = harness.run_scenario_text(GOOD)
    trace = result.artifacts["run.trace"]
    report = result.artifacts["run.report.txt"]
    stored = tmp_path / "run.trace"
    stored.write_text(trace)
    assert harness.render_run_report(stored.read_text()) == report


def test_every_bundled_scenario_parses():
    for name in harness.BUNDLED:
        scn = harness.parse_scenario(harness.load_bundled(name))
        assert scn.name == name


def test_empty_matrix_is_a_clean_pass():
    human, json_lines, ok = harness.run_matrix([])
    assert ok
    assert json_lines == ""


def test_containment_rows_cover_the_standard_nine():
    result = harness.run_scenario_text(harness.load_bundled("table3"))
    rows = json.loads(result.artifacts["matrix.json"])
    assert [r["num"] for r in rows] == [1, 2, 3, 4, 5, 6, 7, 8, 11]


# -- CLI -----------------------------------------------------------------------

def test_cli_run_bundled_scenario_exit_zero(capsys):
    assert cli.main(["run", "table3"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out


def test_cli_run_writes_artifacts(tmp_path, capsys):
    code = cli.main(["--out", str(tmp_path), "run", "table3"])
    assert code == 0
    assert (tmp_path / "table3" / "matrix.txt").exists()
    assert (tmp_path / "table3" / "verdicts.json").exists()


def test_cli_expectation_failure_exit_one(tmp_path, capsys):
    bad = GOOD.replace("expect VIC ALIVE", "expect VIC DIED")
    path = tmp_path / "bad.scenario"
    path.write_text(bad)
    assert cli.main(["run", str(path)]) == 1


def test_cli_parse_error_exit_two(tmp_path, capsys):
    path = tmp_path / "broken.scenario"
    path.write_text("version 1\nnonsense here\n")
    assert cli.main(["run", str(path)]) == 2
    assert "parse error" in capsys.readouterr().err


def test_cli_missing_file_exit_two(capsys):
    assert cli.main(["run", "/nonexistent.scenario"]) == 2


def test_cli_json_output_is_machine_readable(capsys):
    assert cli.main(["--json", "run", "reachability-audit"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["scenario"] == "reachability-audit"
    assert payload["passed"] is True


def test_cli_render_reproduces_the_report(tmp_path, capsys):
    cli.main(["--out", str(tmp_path), "run", "fig3-isolation-throughput"])
    capsys.readouterr()
    trace = tmp_path / "fig3-isolation-throughput" / "fault.isolation_on.trace"
    assert cli.main(["render", str(trace)]) == 0
    rendered = capsys.readouterr().out
    stored = (tmp_path / "fig3-isolation-throughput" /
              "fault.isolation_on.report.txt").read_text()
    assert rendered == stored


def test_cli_no_isolation_flag_forces_stock_behavior(tmp_path, capsys):
    path = tmp_path / "noiso.scenario"
    path.write_text(
        "version 1\nname noiso\nkind single\n"
        "client INJ mps injector\nclient VIC mps victim iterations=3\n"
        "inject 6000 INJ mmu.oob.sm\n"
    )
    assert cli.main(["run", str(path)]) == 0
    capsys.readouterr()
    out = json.loads(_json_run(capsys, ["--json", "run", str(path)]))
    assert out["verdicts"]["VIC"] == "ALIVE"
    out2 = json.loads(_json_run(capsys, ["--json", "--no-isolation", "run",
                                         str(path)]))
    assert out2["verdicts"]["VIC"] == "DIED"


def _json_run(capsys, argv):
    cli.main(argv)
    return capsys.readouterr().out
