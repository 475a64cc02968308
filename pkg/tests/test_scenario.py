from __future__ import annotations

import json
from pathlib import Path

import pytest

from euiccsim import cli
from euiccsim import scenario as sc

FIXTURES = Path(__file__).parent / "fixtures"
SHIPPED = sorted((Path(sc.__file__).parent / "scenarios").glob("*.scn"))

MINIMAL = """\
scenario minimal
seed 1
[actors]
eum e
[steps]
manufacture card=c1 eum=e
[expect]
profile card=c1 profile=provisioning state=Enabled
"""


def test_minimal_parses_and_runs():
    s = sc.parse_scenario(MINIMAL)
    assert s.name == "minimal" and len(s.steps) == 1
    report, _ = sc.run(s)
    assert report.passed


def test_lifecycle_has_12_steps():
    assert len(sc.load(sc.shipped("lifecycle")).steps) == 12


@pytest.mark.parametrize("text,error,line", [
    (MINIMAL.replace("eum=e", "eum=ghost"), sc.DanglingReference, 6),
    (MINIMAL + "outcome step=nope is=ok\n", sc.DanglingReference, 9),
    (MINIMAL.replace("manufacture", "teleport"), sc.UnknownStep, 6),
    (MINIMAL.replace("seed 1", "seed x"), sc.ScenarioSyntaxError, 2),
    (MINIMAL.replace("[steps]", "[stuff]"), sc.ScenarioSyntaxError, 5),
    (MINIMAL + "profile card=c2 profile=provisioning\n", sc.DanglingReference, 9),
    (MINIMAL.replace("card=c1 eum=e", "card=c1"), sc.ScenarioSyntaxError, 6),
    (MINIMAL.replace("[steps]\n", "[steps]\nsubscribe device=d mno=m\n"), sc.DanglingReference, 6),
], ids=["eum", "step-ref", "verb", "seed", "section", "card", "missing-arg", "device"])
def test_parse_errors_are_line_anchored(text, error, line):
    with pytest.raises(error) as info:
        sc.parse_scenario(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_undeclared_mno_is_dangling():
    text = MINIMAL.replace("[steps]\n", "[steps]\n") + ""
    text = text.replace("manufacture card=c1 eum=e", "manufacture card=c1 eum=e\nupdate-pol1 card=c1 mno=m rules=lock")
    with pytest.raises(sc.DanglingReference):
        sc.parse_scenario(text)


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.stem)
def test_shipped_scenarios_pass(path):
    report, _ = sc.run(sc.load(path))
    assert report.passed, report.to_text()


@pytest.mark.parametrize("seed", [0, 1, 2, 99, 12345])
def test_lifecycle_seed_independent(seed):
    report, _ = sc.run(sc.load(sc.shipped("lifecycle")), seed=seed)
    assert report.passed, report.to_text()


def test_locked_disable_expectation_fails():
    report, sim = sc.run(sc.load(FIXTURES / "locked_disable_succeeds.scn"))
    assert not report.passed
    failed = [e for e in report.expectations if not e.passed]
    assert len(failed) == 2  # every expectation is evaluated
    assert "CONDITIONS_NOT_SATISFIED" in failed[0].detail
    assert "CONDITIONS_NOT_SATISFIED" in sim.net.trace_lines()


def test_runtime_errors_become_failed_expectations():
    text = MINIMAL.replace("[expect]", "enable card=c1 profile=provisioning\n[expect]")
    text = text.replace("[actors]\neum e", "[actors]\neum e\nsmsr s")
    report, _ = sc.run(sc.parse_scenario(text + "outcome step=2 is=ok\n"))
    assert not report.passed
    step = report.steps[1]
    assert step.outcome == "UnknownEid"
    assert "trace events" in report.expectations[-1].detail


def test_report_reproducible():
    s = sc.load(sc.shipped("lifecycle"))
    assert sc.run(s)[0].to_json() == sc.run(s)[0].to_json()


def test_cli_run_exit_codes(tmp_path, capsys):
    assert cli.main(["run", str(sc.shipped("lifecycle"))]) == 0
    assert cli.main(["run", str(FIXTURES / "locked_disable_succeeds.scn")]) == 1
    bad = tmp_path / "bad.scn"
    bad.write_text("nonsense\n")
    assert cli.main(["run", str(bad)]) == 2
    assert cli.main(["validate", str(bad)]) == 2
    assert cli.main(["validate", str(sc.shipped("lifecycle"))]) == 0


def test_cli_json_report(capsys):
    assert cli.main(["run", str(sc.shipped("lifecycle")), "--json-report", "--seed", "4"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] and report["seed"] == 4
    assert set(report) >= {"expectations", "digests", "trace_path", "steps"}


def test_cli_trace_and_replay(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert cli.main(["run", str(sc.shipped("lifecycle")), "--trace", str(trace)]) == 0
    lines = trace.read_text().splitlines()
    assert "meta" in json.loads(lines[0])
    assert all("event" in json.loads(ln) for ln in lines[1:])
    assert cli.main(["replay", str(trace)]) == 0
    assert "identical" in capsys.readouterr().out
    doctored = tmp_path / "d.jsonl"
    doctored.write_text("\n".join(lines[:-1]) + "\n")
    assert cli.main(["replay", str(doctored)]) == 1


def test_cli_registry_save_and_load(tmp_path):
    reg = tmp_path / "reg.jsonl"
    assert cli.main(["run", str(sc.shipped("lifecycle")), "--registry", str(reg)]) == 0
    rows = [json.loads(x) for x in reg.read_text().splitlines()]
    assert [r["smsr"] for r in rows] == ["smsr2"]
    assert "k80" in rows[0]["eis"]
    text = """\
scenario preload
seed 7
[actors]
eum eum1
smsr smsr1
smsr smsr2
[steps]
manufacture card=c1 eum=eum1
[expect]
eis smsr=smsr2 card=c1 present=true
"""
    f = tmp_path / "p.scn"
    f.write_text(text)
    assert cli.main(["run", str(f), "--load-registry", str(reg)]) == 0
