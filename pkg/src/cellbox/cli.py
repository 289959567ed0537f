"""Command line front end.

Exit codes: 0 success, 1 invalid input (program, spec or sidecar),
2 the guest was stopped by a violation or a check failed, 3 internal error,
4 guest fault (panic) or step budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import analyze
from .callgraph import VisibilityError, build_call_graph
from .instrument import CopyPlanError, InstrumentedProgram, instrument_analysis
from .interp import DEFAULT_STEP_BUDGET, Outcome, explore_paths, run, run_oracle
from .ir import MiniMIRError, parse_program
from .spec import SpecError, load_spec, resolve_units

SCHEMA_VERSION = 1

EXIT_OK, EXIT_INVALID, EXIT_VIOLATION, EXIT_INTERNAL, EXIT_FAULT = 0, 1, 2, 3, 4


class _Emitter:
    def __init__(self, fmt: str, out=None):
        self.fmt = fmt
        self.out = out or sys.stdout

    def record(self, kind: str, data: dict, text: str | None = None) -> None:
        if self.fmt == "structured":
            self.out.write(json.dumps({"schema": SCHEMA_VERSION, "kind": kind, **data}, sort_keys=True) + "\n")
        elif text is not None:
            self.out.write(text if text.endswith("\n") else text + "\n")


def _load(args, program_path=None, spec_path=None):
    program = parse_program(Path(program_path or args.program).read_text(encoding="utf-8"))
    spec = load_spec(spec_path or args.spec)
    units = resolve_units(spec, program)
    containers = tuple(args.containers.split(",")) if args.containers else spec.containers
    result = analyze(program, units, containers, context_sensitive=not args.no_context)
    return program, units, result


def _analysis_text(report: dict) -> str:
    lines = [f"units: {len(report['units'])}"]
    for u in report["units"]:
        extra = f" (+{len(u['cloned_helpers'])} cloned helpers)" if u["cloned_helpers"] else ""
        lines.append(
            f"  [{u['id']}] {u['kind']} {u['name']} transient={str(u['transient']).lower()}"
            f" entry={','.join(u['entry'])}{extra}"
        )
    if report["shared_helpers_kept_in_root"]:
        lines.append("helpers also running in root: " + ", ".join(report["shared_helpers_kept_in_root"]))
    lines.append(f"boundary call sites: {len(report['boundary_sites'])}")
    for b in report["boundary_sites"]:
        lines.append(f"  {b['caller']}#{b['index']} -> {b['callee']} ({b['from']} -> {b['to']})")
    r = report["reach"]
    lines.append(
        f"reach: {r['size']} places ({r['size_before_context_filter']} before context filter),"
        f" {r['iterations']} iterations (bound {r['iteration_bound']})"
    )
    lines.append(f"alloc sites: {len(report['alloc_sites'])}")
    for s in report["alloc_sites"]:
        lines.append(f"  {s['function']}#{s['index']} {s['container']} -> {s['dest']} shared={s['shared_domain']}")
    for d in report["shared_domains"]:
        lines.append(f"shared domain {d['id']}: {', '.join(d['participants'])}")
    return "\n".join(lines)


def cmd_analyze(args, em: _Emitter) -> int:
    program, _units, result = _load(args)
    if args.callgraph:
        cg = build_call_graph(program)
        Path(args.callgraph).write_text(
            cg.to_dot() if args.callgraph.endswith(".dot") else cg.to_edge_list(), encoding="utf-8"
        )
    report = result.report()
    em.record("analysis", report, _analysis_text(report))
    return EXIT_OK


def _sidecar_path(out: Path) -> Path:
    return out.with_name(out.name + ".json")


def cmd_instrument(args, em: _Emitter) -> int:
    _program, _units, result = _load(args)
    ip = instrument_analysis(result, args.mode)
    text, sidecar = ip.text(), ip.sidecar_text()
    if args.output:
        out = Path(args.output)
        out.write_text(text, encoding="utf-8")
        _sidecar_path(out).write_text(sidecar, encoding="utf-8")
        em.record(
            "instrumented",
            {"program": str(out), "sidecar": str(_sidecar_path(out)), "wrappers": len(ip.wrappers),
             "warnings": ip.warnings},
            f"wrote {out} and {_sidecar_path(out)} ({len(ip.wrappers)} wrappers)",
        )
    else:
        em.record("instrumented", {"program_text": text, "sidecar": json.loads(sidecar)}, text)
    for w in ip.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def _outcome_record(o: Outcome, seed: int) -> dict:
    return {
        "seed": seed,
        "status": o.status,
        "value": o.value,
        "stdout": o.stdout,
        "violation": str(o.violation) if o.violation else None,
        "fault": o.fault,
        "stats": {k: v for k, v in o.stats.items() if k != "allocs"},
        "allocs": {str(k): v for k, v in o.stats["allocs"].items()},
    }


def _exit_for(o: Outcome) -> int:
    return {"completed": EXIT_OK, "violated": EXIT_VIOLATION}.get(o.status, EXIT_FAULT)


def cmd_run(args, em: _Emitter) -> int:
    source = Path(args.program).read_text(encoding="utf-8")
    if args.sidecar or (args.spec is None and _sidecar_path(Path(args.program)).exists()):
        sidecar = Path(args.sidecar) if args.sidecar else _sidecar_path(Path(args.program))
        target = InstrumentedProgram.load(source, json.loads(sidecar.read_text(encoding="utf-8")))
    elif args.spec:
        _p, _u, result = _load(args)
        target = instrument_analysis(result, args.mode)
    else:
        target = parse_program(source)
        if target.wrappers:
            raise ValueError(f"{args.program} is instrumented but has no sidecar; pass --sidecar")
        print("warning: running without instrumentation (no --spec or sidecar)", file=sys.stderr)
    codes = [EXIT_OK]
    for seed in _seeds(args):
        o = run(target, seed, args.step_budget)
        rec = _outcome_record(o, seed)
        text = f"seed {seed}: {o.status}"
        if o.value is not None:
            text += f" value={o.value}"
        if o.violation:
            text += f" ({o.violation})"
        if o.fault:
            text += f" ({o.fault})"
        for line in o.stdout:
            text += f"\n  stdout: {line}"
        if args.trace:
            rec["trace"] = o.trace.lines
            text += "\n" + o.trace.text().rstrip()
        em.record("run", rec, text)
        codes.append(_exit_for(o))
    return EXIT_VIOLATION if EXIT_VIOLATION in codes else max(codes)


def _seeds(args) -> list[int]:
    if args.seeds is not None:
        return list(range(args.seeds))
    if args.seed is not None:
        return [args.seed]
    return [0]


def cmd_check(args, em: _Emitter) -> int:
    """Compare the static allocation sites with what the oracle observes.

    ``program`` may be a directory: every ``*.mir`` in it is checked against
    ``--spec`` or, without it, the ``.spec`` file with the same stem.
    """
    target = Path(args.program)
    if not target.is_dir():
        if args.spec is None:
            raise ValueError("check needs --spec for a single program")
        return _check_one(args, em, target, args.spec)
    programs = sorted(target.glob("*.mir"))
    if not programs:
        raise ValueError(f"{target} contains no .mir files")
    failed = []
    for prog in programs:
        spec = args.spec or prog.with_suffix(".spec")
        if _check_one(args, em, prog, spec, label=prog.name) != EXIT_OK:
            failed.append(prog.name)
    verdict = "FAIL" if failed else "PASS"
    em.record(
        "check-summary",
        {"verdict": verdict, "programs": len(programs), "failed": failed},
        f"{verdict}: {len(programs) - len(failed)}/{len(programs)} programs pass"
        + (f" (failed: {', '.join(failed)})" if failed else ""),
    )
    return EXIT_VIOLATION if failed else EXIT_OK


def _check_one(args, em: _Emitter, program_path, spec_path, label: str | None = None) -> int:
    program, units, result = _load(args, program_path, spec_path)
    if args.seed is None and args.seeds is None:
        seeds, exhaustive = explore_paths(program, args.step_budget, args.max_paths)
    else:
        seeds, exhaustive = _seeds(args), False
    oracle = run_oracle(program, units, seeds, args.step_budget)
    static = {s.location for s in result.sites}
    runs = []
    for seed, o in zip(oracle.seeds, oracle.outcomes):
        missed = sorted(oracle.by_seed[seed] - static)
        if missed:
            verdict = "FAIL"
        elif o.status == "budget-exceeded":
            verdict = "INCONCLUSIVE"
        else:
            verdict = "PASS"
        runs.append({"seed": seed, "verdict": verdict, "status": o.status,
                     "missed": [f"{f}#{i}" for f, i in missed]})
    if args.compare:
        ip = instrument_analysis(result, args.mode)
        for rec in runs:
            plain, inst = run(program, rec["seed"], args.step_budget), run(ip, rec["seed"], args.step_budget)
            rec["equivalent"] = plain.observable() == inst.observable()
            if not rec["equivalent"]:
                rec["instrumented"] = str(inst.violation) if inst.violation else inst.status
    failed = [r for r in runs if r["verdict"] == "FAIL" or r.get("equivalent") is False]
    verdict = "FAIL" if failed else "PASS"
    data = {
        "program": str(program_path),
        "verdict": verdict,
        "exhaustive": exhaustive,
        "static_sites": [f"{f}#{i}" for f, i in sorted(static)],
        "observed_sites": [f"{f}#{i}" for f, i in sorted(oracle.sites)],
        "runs": runs,
    }
    lines = [
        f"{verdict}: {len(oracle.sites)} observed crossing sites, all within {len(static)} static sites"
        if verdict == "PASS" or not any(r["missed"] for r in runs)
        else f"{verdict}: observed crossing sites missing from the analysis",
        f"  seeds: {len(seeds)}" + (" (every branch path)" if exhaustive else ""),
    ]
    for r in runs:
        if r["verdict"] != "PASS" or r.get("equivalent") is False:
            line = f"  seed {r['seed']}: {r['verdict']} ({r['status']})"
            if r["missed"]:
                line += " missed " + ", ".join(r["missed"])
            if r.get("equivalent") is False:
                line += f" instrumented run differs: {r['instrumented']}"
            lines.append(line)
    if label is not None:
        if verdict == "PASS" and not args.verbose:
            lines = []  # directory mode: list passing programs only with -v
        else:
            lines[0] = f"{label}: {lines[0]}"
    em.record("check", data, "\n".join(lines) if lines else None)
    return EXIT_VIOLATION if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellbox", description="Sandbox analysis and instrumentation for MiniMIR.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--format", choices=("text", "structured"), default="text")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, spec_required=True):
        p.add_argument("program")
        p.add_argument("--spec", required=spec_required)
        p.add_argument("--containers", help="comma-separated container kinds (default: from spec)")
        p.add_argument("--no-context", action="store_true", help="skip the call/return matching filter")

    def seeds(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--seed", type=int)
        g.add_argument("--seeds", type=int, help="run seeds 0..N-1")
        p.add_argument("--step-budget", type=int, default=DEFAULT_STEP_BUDGET)

    p = sub.add_parser("analyze", help="report boundaries, reach and allocation sites")
    common(p)
    p.add_argument("--callgraph", metavar="FILE", help="export the call graph (.dot or edge list)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("instrument", help="emit the instrumented program and its sidecar")
    common(p)
    p.add_argument("--mode", choices=("copy", "share"), default="share")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_instrument)

    p = sub.add_parser("run", help="interpret a program (plain, instrumented from a spec, or with a sidecar)")
    common(p, spec_required=False)
    p.add_argument("--mode", choices=("copy", "share"), default="share")
    p.add_argument("--sidecar")
    p.add_argument("--trace", action="store_true")
    seeds(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="compare the analysis with observed executions")
    common(p, spec_required=False)
    p.add_argument("--mode", choices=("copy", "share"), default="share")
    p.add_argument("--compare", action="store_true", help="also compare instrumented and plain runs")
    p.add_argument("--max-paths", type=int, default=4096, help="cap on enumerated branch paths")
    seeds(p)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s: %(message)s")
    em = _Emitter(args.format)
    try:
        return args.func(args, em)
    except (MiniMIRError, SpecError, VisibilityError, CopyPlanError, OSError, ValueError) as e:
        em.record("error", {"error": type(e).__name__, "message": str(e)})
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, MiniMIRError):
            for d in e.diagnostics or ():
                print(f"  {d}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
