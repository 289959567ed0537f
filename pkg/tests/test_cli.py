from __future__ import annotations

import json
import shutil
import subprocess
import sys

import pytest

from cellbox.cli import main
from conftest import FIXTURES


@pytest.fixture
def work(tmp_path):
    for name in ("vec_pass.mir", "vec_pass.spec", "two_units.mir", "two_units.spec"):
        shutil.copy(FIXTURES / name, tmp_path / name)
    return tmp_path


def records(out: str) -> list[dict]:
    return [json.loads(line) for line in out.splitlines() if line.strip()]


def test_analyze_text(work, capsys):
    assert main(["analyze", str(work / "vec_pass.mir"), "--spec", str(work / "vec_pass.spec")]) == 0
    out = capsys.readouterr().out
    assert "boundary call sites: 1" in out
    assert "app::main#0 vec -> app::main::_1.s shared=1000000" in out


def test_analyze_structured_and_callgraph(work, capsys):
    dot = work / "cg.dot"
    rc = main(["--format", "structured", "analyze", str(work / "two_units.mir"), "--spec", str(work / "two_units.spec"),
               "--callgraph", str(dot)])
    assert rc == 0
    (rec,) = records(capsys.readouterr().out)
    assert rec["schema"] == 1 and rec["kind"] == "analysis"
    assert len(rec["boundary_sites"]) == 2
    assert dot.read_text().startswith("digraph")


def test_instrument_idempotent(work, capsys):
    args = [str(work / "vec_pass.mir"), "--spec", str(work / "vec_pass.spec")]
    outs = []
    for name in ("a.mir", "b.mir"):
        assert main(["instrument", *args, "-o", str(work / name)]) == 0
        outs.append(((work / name).read_bytes(), (work / f"{name}.json").read_bytes()))
    assert outs[0] == outs[1]
    assert b"call __wrap::sbx__sandbox" in outs[0][0]


def test_run_with_sidecar(work, capsys):
    out = work / "i.mir"
    main(["instrument", str(work / "vec_pass.mir"), "--spec", str(work / "vec_pass.spec"), "-o", str(out)])
    capsys.readouterr()
    assert main(["--format", "structured", "run", str(out), "--seeds", "2"]) == 0
    recs = records(capsys.readouterr().out)
    assert [r["status"] for r in recs] == ["completed", "completed"]
    assert all(r["allocs"] == {"1000000": 2} for r in recs)


def test_run_missing_sidecar(work, capsys):
    out = work / "i.mir"
    main(["instrument", str(work / "vec_pass.mir"), "--spec", str(work / "vec_pass.spec"), "-o", str(out)])
    (work / "i.mir.json").unlink()
    assert main(["run", str(out)]) == 1
    assert "no sidecar" in capsys.readouterr().err
    assert main(["run", str(out), "--sidecar", str(work / "nope.json")]) == 1


def test_run_plain_warns(work, capsys):
    assert main(["run", str(work / "two_units.mir")]) == 0
    cap = capsys.readouterr()
    assert "value=63" in cap.out and "without instrumentation" in cap.err


def test_run_violation_exit_code(work, capsys):
    (work / "bad.mir").write_text(
        "crate app { pub fn main() -> i32 { let _1: i32; _0 = call sbx::f(_1); return; } }\n"
        "crate sbx { pub fn f(_1: i32) -> i32 { _0 = syscall getpid(); return; } }\n"
    )
    (work / "bad.spec").write_text("[crates]\nsbx = { transient = false }\n")
    assert main(["run", str(work / "bad.mir"), "--spec", str(work / "bad.spec"), "--trace"]) == 2
    out = capsys.readouterr().out
    assert "syscall-denied" in out and "syscall name=getpid domain=2 verdict=deny" in out


def test_run_fault_and_budget_exit_code(work, capsys):
    (work / "loop.mir").write_text("fn main() { bb0: goto bb0; }\n")
    assert main(["run", str(work / "loop.mir"), "--step-budget", "50"]) == 4
    (work / "oob.mir").write_text("fn main() -> i32 { let _1: vec<i32>; _0 = _1[0]; return; }\n")
    assert main(["run", str(work / "oob.mir")]) == 4


def test_invalid_inputs(work, capsys):
    (work / "broken.mir").write_text("fn main( {")
    assert main(["analyze", str(work / "broken.mir"), "--spec", str(work / "two_units.spec")]) == 1
    (work / "overlap.spec").write_text("[crates]\napp = { transient = false }\n[functions]\napp::foo = { transient = true }\n")
    assert main(["analyze", str(work / "two_units.mir"), "--spec", str(work / "overlap.spec")]) == 1
    assert main(["analyze", str(work / "missing.mir"), "--spec", str(work / "two_units.spec")]) == 1
    assert "error:" in capsys.readouterr().err


def test_structured_error_record(work, capsys):
    (work / "broken.mir").write_text("fn main( {")
    assert main(["--format", "structured", "analyze", str(work / "broken.mir"), "--spec", str(work / "two_units.spec")]) == 1
    (rec,) = records(capsys.readouterr().out)
    assert rec["kind"] == "error" and rec["error"] == "MiniMIRError"


def test_check_pass(work, capsys):
    args = [str(work / "vec_pass.mir"), "--spec", str(work / "vec_pass.spec")]
    assert main(["check", *args, "--compare"]) == 0
    assert capsys.readouterr().out.startswith("PASS: 2 observed crossing sites")
    assert main(["--format", "structured", "check", *args]) == 0
    (rec,) = records(capsys.readouterr().out)
    assert rec["verdict"] == "PASS" and [r["seed"] for r in rec["runs"]] == [0, 1]


def test_check_detects_unsound_analysis(work, capsys):
    # without the element summaries the vec passed by value is missed
    args = [str(work / "vec_pass.mir"), "--spec", str(work / "vec_pass.spec"), "--containers", "none"]
    assert main(["check", *args]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_console_script_outputs_identical(work):
    exe = shutil.which("cellbox")
    cmd = [exe] if exe else [sys.executable, "-m", "cellbox.cli"]
    args = ["--format", "structured", "analyze", str(work / "vec_pass.mir"), "--spec", str(work / "vec_pass.spec")]
    a = subprocess.run(cmd + args, capture_output=True, check=True).stdout
    b = subprocess.run(cmd + args, capture_output=True, check=True).stdout
    assert a == b and json.loads(a)["kind"] == "analysis"


def test_check_corpus_directory(tmp_path, capsys):
    from cellbox.gen import write_corpus

    write_corpus(tmp_path / "corpus", 30)
    assert main(["check", str(tmp_path / "corpus")]) == 0
    assert capsys.readouterr().out.strip() == "PASS: 30/30 programs pass"
    assert main(["--format", "structured", "check", str(tmp_path / "corpus")]) == 0
    recs = records(capsys.readouterr().out)
    assert [r["kind"] for r in recs] == ["check"] * 30 + ["check-summary"]
    assert all(r["exhaustive"] for r in recs[:-1])


def test_check_single_program_needs_spec(work, capsys):
    assert main(["check", str(work / "vec_pass.mir")]) == 1


def test_empty_spec(work, capsys):
    from cellbox.ir import format_program, parse_program

    (work / "empty.spec").write_text("")
    canonical = work / "canonical.mir"
    canonical.write_text(format_program(parse_program((work / "vec_pass.mir").read_text())))
    assert main(["analyze", str(canonical), "--spec", str(work / "empty.spec")]) == 0
    assert "boundary call sites: 0" in capsys.readouterr().out
    out = work / "same.mir"
    assert main(["instrument", str(canonical), "--spec", str(work / "empty.spec"), "-o", str(out)]) == 0
    assert out.read_bytes() == canonical.read_bytes()
