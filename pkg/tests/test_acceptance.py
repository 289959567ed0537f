"""Acceptance criteria, one test each, at their stated tolerances.

Run ``pytest tests/test_acceptance.py -v`` (add ``-s`` for measurements); the
terminal summary ends with one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import contextlib
import dataclasses
import io
import json
import time

import pytest

from cellbox.analysis import analyze
from cellbox.cli import main
from cellbox.gen import MAX_BRANCHES, MAX_DECISIONS, MAX_FUNCTIONS, MAX_STATEMENTS, corpus
from cellbox.instrument import instrument_analysis
from cellbox.interp import Interpreter, explore_paths, run, run_oracle
from cellbox.ir import Assign, Block, Branch, Const, Goto, Return
from cellbox.runtime import (
    MONITOR,
    ROOT,
    ROOT_UNIT,
    SHARED_BASE,
    DomainKind,
    DomainTable,
    SyscallPolicy,
    ViolationKind,
    filter_syscall,
)
from cellbox.spec import resolve_units
from conftest import FIXTURES, fixture_text, load_pair

BUDGET = 20_000
N_GENERATED = 200


class _Corpus(list):
    build_seconds = 0.0


@pytest.fixture(scope="module")
def generated():
    t0 = time.perf_counter()
    out = _Corpus()
    for g in corpus(N_GENERATED):
        p = g.program
        units = resolve_units(g.spec, p)
        seeds, complete = explore_paths(p, BUDGET, 2**MAX_DECISIONS)
        out.append((g, p, units, analyze(p, units), seeds, complete))
    out.build_seconds = time.perf_counter() - t0
    return out


# -- 1 -------------------------------------------------------------------------


@pytest.mark.criterion(1, "worked example reports exactly the two vec allocation sites")
def test_c1_worked_example(detail):
    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        rc = main(["--format", "structured", "analyze", str(FIXTURES / "vec_pass.mir"),
                   "--spec", str(FIXTURES / "vec_pass.spec")])
    elapsed = time.perf_counter() - t0
    rec = json.loads(buf.getvalue())
    sites = [(s["function"], s["index"], s["dest"]) for s in rec["alloc_sites"]]
    detail(f"sites={sites} in {elapsed:.3f}s")
    assert rc == 0
    assert sites == [("app::main", 0, "app::main::_1.s"), ("app::main", 1, "app::main::_2")]
    assert elapsed < 1.0


# -- 2 -------------------------------------------------------------------------


@pytest.mark.criterion(2, "oracle crossing sites within static sites on generated programs")
def test_c2_soundness(generated, detail):
    t0 = time.perf_counter()
    runs = crossing = 0
    counterexamples = []
    for g, p, units, result, seeds, complete in generated:
        assert complete, f"generated program {g.seed} has more than {2**MAX_DECISIONS} paths"
        assert len(p.functions) <= MAX_FUNCTIONS
        assert sum(isinstance(s, Branch) for f in p.functions.values() for s in f.statements()) <= MAX_BRANCHES
        assert all(len(f.statements()) - _control(f) <= MAX_STATEMENTS for f in p.functions.values())
        rep = run_oracle(p, units, seeds, BUDGET)
        runs += len(seeds)
        crossing += bool(rep.sites)
        static = {s.location for s in result.sites}
        for seed in seeds:
            missed = rep.by_seed[seed] - static
            if missed:
                counterexamples.append((g.seed, seed, sorted(missed)))
    # generation, path enumeration and analysis happen in the fixture
    elapsed = time.perf_counter() - t0 + generated.build_seconds
    detail(f"{len(generated)} programs, {runs} runs (all paths), {crossing} with crossings, "
           f"{len(counterexamples)} counterexamples, {elapsed:.1f}s")
    assert not counterexamples, counterexamples[:5]
    assert len(generated) >= 200 and elapsed < 300


def _control(f) -> int:
    return sum(isinstance(s, (Branch, Goto, Return)) for s in f.statements())


# -- 3 -------------------------------------------------------------------------

# context -> owner -> may access
MATRIX = {
    "root": {"root": True, "monitor": False, "A": True, "B": True, "shared": True},
    "monitor": {"root": True, "monitor": True, "A": True, "B": True, "shared": True},
    "A": {"root": False, "monitor": False, "A": True, "B": False, "shared": True},
    "B": {"root": False, "monitor": False, "A": False, "B": True, "shared": False},
    "shared": {"root": False, "monitor": False, "A": False, "B": False, "shared": False},
}


@pytest.mark.criterion(3, "25-entry access matrix")
def test_c3_access_matrix(detail):
    t = DomainTable({0: False, 1: False}, {SHARED_BASE: {ROOT_UNIT, 0}}, stack_size=16, heap_size=32)
    a, b = t.create_sandbox_domain(0), t.create_sandbox_domain(1)
    doms = {"root": ROOT, "monitor": MONITOR, "A": a, "B": b, "shared": t.domain(SHARED_BASE).did}
    mismatches, checks = [], 0
    for ctx, row in MATRIX.items():
        for owner, allowed in row.items():
            for region in (r for r in t.regions if r.owner == doms[owner].id):
                for addr in (region.start, region.end - 1):
                    for is_write in (False, True):
                        checks += 1
                        if (t.check_access(doms[ctx], addr, is_write) is None) != allowed:
                            mismatches.append((ctx, owner, hex(addr), is_write))
    detail(f"25 entries, {checks} checks, {len(mismatches)} mismatches")
    assert not mismatches


# -- 4 -------------------------------------------------------------------------

SWEEP = """
crate app {
    pub fn main() -> i32 {
        let _1: vec<i32>;
        let _2: i32;
        let _3: i32;
        _1 = alloc vec<i32>[4];
        _3 = call other::idle(_3);
        _2 = const 0;
        _3 = call sbx::poke(_1, _2);
        _0 = _3;
        return;
    }
}
crate other {
    pub fn idle(_1: i32) -> i32 { _0 = _1; return; }
}
crate sbx {
    pub fn poke(_1: vec<i32>, _2: i32) -> i32 {
        let _3: i32;
        _3 = const 777777;
        rawstore [*_2], _3;
        _0 = const 0;
        return;
    }
}
"""
MARKER = 777777
SMALL = {"stack_size": 32, "heap_size": 64, "shared_heap_size": 64}


def _with_target(ip, addr: int):
    """``ip`` with the constant written to main's ``_2`` replaced by ``addr``."""
    main_fn = ip.program.functions["app::main"]
    (b,) = main_fn.blocks
    stmts = tuple(
        dataclasses.replace(s, src=Const(addr)) if isinstance(s, Assign) and s.dst.base == 2 else s for s in b.stmts
    )
    functions = dict(ip.program.functions)
    functions["app::main"] = dataclasses.replace(main_fn, blocks=(Block(b.label, stmts),))
    return dataclasses.replace(ip, program=dataclasses.replace(ip.program, functions=functions))


@pytest.mark.criterion(4, "in-sandbox rawstore sweep over the whole address space")
def test_c4_confinement(detail):
    p, units = load_pair(SWEEP, "[crates]\nsbx = { transient = false }\nother = { transient = false }\n")
    ip = instrument_analysis(analyze(p, units), "share")
    assert ip.shared and all(0 in parts for parts in ip.shared.values())
    probe = Interpreter(_with_target(ip, 0), **SMALL)
    probe.run()
    table = probe.table
    sbx_unit = next(u.unit_id for u in ip.units if u.name == "sbx")
    sbx_dom = table.persistent[sbx_unit]
    own_stack = table.domain(sbx_dom).stack
    writable = {sbx_dom.id} | {sid for sid, parts in ip.shared.items() if sbx_unit in parts}
    end = table.address_space_end + 64
    escapes, wrong, allowed = [], [], 0
    for addr in range(end):
        it = Interpreter(_with_target(ip, addr), **SMALL)
        o = it.run()
        owner = it.table.owner_of(addr)
        expect_ok = owner is not None and owner.did.id in writable
        hits = {a for a, v in it.table.mem.items() if v == MARKER and a not in own_stack}
        if expect_ok:
            allowed += 1
            if o.status != "completed" or (addr not in own_stack and hits != {addr}):
                wrong.append((hex(addr), o.status))
        else:
            if o.status != "violated" or o.violation.kind is not ViolationKind.MEMORY_ACCESS:
                wrong.append((hex(addr), o.status))
            if hits:
                escapes.append(hex(addr))
    detail(f"{end} addresses swept, {allowed} own/member-shared writes allowed, "
           f"{end - allowed} violated, {len(escapes)} escapes, {len(wrong)} wrong outcomes")
    assert not escapes and not wrong


# -- 5 -------------------------------------------------------------------------

LIFECYCLE = """
crate app {
    pub fn main() -> i32 {
        let _1: i32;
        let _2: i32;
        let _3: i32;
        _1 = call sbx::step(_3);
        _2 = call sbx::step(_1);
        _0 = _2;
        return;
    }
}
crate sbx {
    static COUNT: i32;
    // bumps its counter and returns the counter's address; with seed 0b10 the
    // second call also reads through the address returned by the first
    pub fn step(_1: i32) -> i32 {
        let _2: i32;
        @sbx::COUNT = add @sbx::COUNT, 1;
        branch bb1, bb2;
    bb1:
        goto bb3;
    bb2:
        _2 = rawload [*_1];
        goto bb3;
    bb3:
        _0 = addr @sbx::COUNT;
        return;
    }
}
"""


def _lifecycle(transient: bool, seed: int):
    p, units = load_pair(LIFECYCLE, f"[crates]\nsbx = {{ transient = {str(transient).lower()} }}\n")
    it = Interpreter(instrument_analysis(analyze(p, units), "copy"), seed)
    return it, it.run()


@pytest.mark.criterion(5, "transient and persistent lifecycle")
def test_c5_lifecycle(detail):
    results = {}
    # transient: two instances, fresh zeroed state each time, stale address traps
    it, o = _lifecycle(True, 0)
    creates = [line for line in o.trace.lines if line.startswith("create ")]
    results["transient distinct instances"] = len(creates) == 2 and "instance=1" in creates[0] and "instance=2" in creates[1]
    first, second = (line.split("domain=")[1].split()[0] for line in creates)
    results["transient zeroed state"] = _counts(it) == [1, 1]
    results["transient destroyed"] = sum(line.startswith("destroy ") for line in o.trace.lines) == 2
    _, stale = _lifecycle(True, 0b10)
    results["transient stale address"] = (
        stale.status == "violated" and stale.violation.kind is ViolationKind.STALE_DOMAIN
        and stale.violation.location == "sbx::step#3" and first != second
    )
    # persistent: one instance whose state carries over, and its own address stays valid
    it, o = _lifecycle(False, 0)
    results["persistent single instance"] = sum(line.startswith("create ") for line in o.trace.lines) == 1
    results["persistent state carried"] = _counts(it) == [2]
    _, again = _lifecycle(False, 0b10)
    results["persistent address reusable"] = again.status == "completed"
    failed = [k for k, ok in results.items() if not ok]
    detail(f"{len(results) - len(failed)}/{len(results)} lifecycle fixtures pass" + (f"; failed {failed}" if failed else ""))
    assert not failed


def _counts(it) -> list[int]:
    """Final counter value of every sandbox instance's static."""
    return [v for (did, path), addr in sorted(it._statics.items()) if path == "sbx::COUNT" for v in [it.table.mem[addr]]]


# -- 6 -------------------------------------------------------------------------

N_ELEMS, N_CALLS = 10_000, 100


def _big_vec_program() -> str:
    calls = "\n".join(
        f"        _2 = call sbx::bump(_1);\n        _3 = syscall write(_2);" for _ in range(N_CALLS)
    )
    return f"""
crate app {{
    pub fn main() -> i32 {{
        let _1: vec<i32>;
        let _2: i32;
        let _3: i32;
        _1 = alloc vec<i32>[{N_ELEMS}];
{calls}
        _0 = _1[{N_ELEMS - 1}];
        return;
    }}
}}
crate sbx {{
    pub fn bump(_1: vec<i32>) -> i32 {{
        _1[{N_ELEMS - 1}] = add _1[{N_ELEMS - 1}], 1;
        _0 = _1[{N_ELEMS - 1}];
        return;
    }}
}}
"""


@pytest.mark.criterion(6, "share mode passes a 10,000-element vec without copying")
def test_c6_share_vs_copy(detail):
    t0 = time.perf_counter()
    p, units = load_pair(_big_vec_program(), "[crates]\nsbx = { transient = false }\n")
    result = analyze(p, units)
    mem = {"heap_size": 4 * N_ELEMS, "shared_heap_size": 4 * N_ELEMS}
    plain = run(p, **mem)
    share = run(instrument_analysis(result, "share"), **mem)
    copy = run(instrument_analysis(result, "copy"), **mem)
    elapsed = time.perf_counter() - t0
    detail(f"share heap copies={share.stats['heap_copies']}, copy heap copies={copy.stats['heap_copies']} "
           f"({copy.stats['slots_copied']} slots), outputs equal={share.observable() == copy.observable()}, {elapsed:.2f}s")
    assert plain.status == share.status == copy.status == "completed"
    assert share.stats["heap_copies"] == 0
    assert copy.stats["heap_copies"] >= N_CALLS
    assert share.observable() == copy.observable() == plain.observable()
    assert share.value == N_CALLS and len(share.stdout) == N_CALLS
    assert elapsed < 10


# -- 7 -------------------------------------------------------------------------

DENY = {
    "self-memory open": 'syscall open("/proc/self/mem")',
    "protection-key call": "syscall pkey_mprotect(4096, 4096, 1, 1)",
    "writable+executable mapping": "syscall mmap(0, 4096, 6)",
    "interposer-region write": "syscall mprotect(256, 16, 3)",
}


def _syscall_program(call: str) -> str:
    return (
        "crate app { pub fn main() -> i32 { let _1: i32; _0 = call sbx::f(_1); return; } }\n"
        f"crate sbx {{ pub fn f(_1: i32) -> i32 {{ _0 = {call}; return; }} }}\n"
    )


@pytest.mark.criterion(7, "syscall deny rules and allow-lists")
def test_c7_syscall_policy(detail):
    spec = '[crates]\nsbx = { transient = false, syscalls = ["open", "pkey_mprotect", "mmap", "mprotect", "write"] }\n'
    mismatches = []
    for label, call in DENY.items():
        p, units = load_pair(_syscall_program(call), spec)
        ip = instrument_analysis(analyze(p, units), "copy")
        o = run(ip)
        if o.status != "violated" or o.violation.kind is not ViolationKind.SYSCALL_DENIED:
            mismatches.append(f"sandbox {label}: {o.status}")
        # the same call from the monitor's context
        stmt = ip.program.functions["sbx::f"].statements()[0]
        args = [a for a in stmt.args]
        if filter_syscall(SyscallPolicy({0: frozenset()}), MONITOR, stmt.name, args) is not None:
            mismatches.append(f"monitor {label}: denied")
    p, units = load_pair(_syscall_program("syscall write(_1)"), spec)
    o = run(instrument_analysis(analyze(p, units), "copy"))
    if o.status != "completed" or o.stdout != ["0"]:
        mismatches.append(f"sandbox write: {o.status}")
    p, units = load_pair(_syscall_program("syscall write(_1)"), "[crates]\nsbx = { transient = false }\n")
    o = run(instrument_analysis(analyze(p, units), "copy"))
    if o.status != "violated" or o.violation.kind is not ViolationKind.SYSCALL_DENIED:
        mismatches.append("sandbox write without allow-list: allowed")
    detail(f"{len(DENY)} deny fixtures x (sandbox, monitor) + 2 allow-list fixtures, {len(mismatches)} mismatches")
    assert not mismatches, mismatches


# -- 8 -------------------------------------------------------------------------


@pytest.mark.criterion(8, "instrumented and plain runs agree on the benign corpus")
def test_c8_equivalence(generated, detail):
    fixtures = [
        load_pair(fixture_text("vec_pass.mir"), fixture_text("vec_pass.spec")),
        load_pair(fixture_text("two_units.mir"), fixture_text("two_units.spec")),
        load_pair(fixture_text("two_caller.mir"), fixture_text("sbx.spec")),
    ]
    cases = [(p, analyze(p, u), explore_paths(p, BUDGET)[0]) for p, u in fixtures]
    cases += [(p, result, seeds) for _g, p, _u, result, seeds, _c in generated]
    total, disagreements = 0, []
    for p, result, seeds in cases:
        modes = [instrument_analysis(result, m) for m in ("copy", "share")]
        for seed in seeds:
            plain = run(p, seed, BUDGET)
            for ip in modes:
                total += 1
                o = run(ip, seed, BUDGET)
                if (o.status, o.value, o.stdout) != (plain.status, plain.value, plain.stdout):
                    disagreements.append((p.entry, seed, ip.mode, o.status))
    detail(f"{len(cases)} programs, {total} instrumented runs, {total - len(disagreements)} agree")
    assert not disagreements, disagreements[:5]


# -- 9 -------------------------------------------------------------------------


def _cli(argv) -> bytes:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(io.StringIO()):
        main(argv)
    return buf.getvalue().encode()


@pytest.mark.criterion(9, "bounded fixed point and byte-identical repeated outputs")
def test_c9_determinism(generated, tmp_path, detail):
    over = [g.seed for g, _p, _u, r, _s, _c in generated if r.reach.iterations > r.reach.iteration_bound]
    prog, spec = str(FIXTURES / "vec_pass.mir"), str(FIXTURES / "vec_pass.spec")
    commands = {}
    for fmt in ("text", "structured"):
        commands[f"{fmt} analyze"] = ["--format", fmt, "analyze", prog, "--spec", spec,
                                      "--callgraph", str(tmp_path / "cg.dot")]
        commands[f"{fmt} instrument"] = ["--format", fmt, "instrument", prog, "--spec", spec, "--mode", "copy"]
        commands[f"{fmt} run"] = ["--format", fmt, "run", prog, "--spec", spec, "--seeds", "2", "--trace"]
        commands[f"{fmt} check"] = ["--format", fmt, "check", prog, "--spec", spec, "--compare"]
    differing = []
    for name, argv in commands.items():
        outputs = {_cli(argv) for _ in range(3)}
        if len(outputs) != 1:
            differing.append(name)
    files = []
    for i in range(3):
        out = tmp_path / f"inst{i}.mir"
        _cli(["instrument", prog, "--spec", spec, "-o", str(out)])
        files.append((out.read_bytes(), (tmp_path / f"inst{i}.mir.json").read_bytes()))
    if len(set(files)) != 1:
        differing.append("instrument -o files")
    detail(f"{len(generated)} analyses within bound ({len(over)} over), "
           f"{len(commands) + 1} subcommand invocations x3, {len(differing)} differ")
    assert not over and not differing, (over, differing)
