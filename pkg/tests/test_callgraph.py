from __future__ import annotations

import pytest

from cellbox.callgraph import (
    Edge,
    VisibilityError,
    boundary_call_sites,
    build_call_graph,
    function_contexts,
)
from cellbox.gen import generate
from cellbox.ir import parse_program
from cellbox.runtime import ROOT_UNIT
from cellbox.spec import parse_spec, resolve_units
from conftest import load_pair


def test_single_call_edge():
    p = parse_program("fn foo() { return; }\nfn main() { _0 = call main::foo(); return; }")
    assert build_call_graph(p).edges == (Edge("main::main", 0, "main::foo"),)


def test_worked_example_edges(vec_pass):
    p, _ = vec_pass
    assert build_call_graph(p).edges == (Edge("app::main", 7, "sbx::sandbox"),)


def test_self_edge():
    p = parse_program("fn f() { _0 = call main::f(); return; }\nfn main() { _0 = call main::f(); return; }")
    assert Edge("main::f", 0, "main::f") in build_call_graph(p).edges


def test_exports():
    p = parse_program("fn foo() { return; }\nfn main() { _0 = call main::foo(); return; }")
    cg = build_call_graph(p)
    assert cg.to_edge_list() == "main::main\t0\tmain::foo\n"
    assert '"main::main" -> "main::foo" [label="0"];' in cg.to_dot()


NESTED = """
crate c {
    pub fn foo() -> i32 { _0 = call c::bar(); return; }
    fn bar() -> i32 { _0 = const 1; return; }
}
fn main() { _0 = call c::foo(); return; }
"""


def test_intra_unit_calls_are_not_boundaries():
    p, units = load_pair(NESTED, "[crates]\nc = { transient = false }\n")
    sites = boundary_call_sites(build_call_graph(p), units)
    assert len(sites) == 1
    assert sites[0].edge.callee == "c::foo" and sites[0].direction == "root->unit"


def test_no_units_no_sites():
    p = parse_program(NESTED)
    assert boundary_call_sites(build_call_graph(p), []) == []


TWO_UNITS = """
crate a { pub fn fa() -> i32 { _0 = call b::fb(); return; } }
crate b { pub fn fb() -> i32 { _0 = const 2; return; } }
fn main() { _0 = call a::fa(); return; }
"""


def test_unit_to_unit_site():
    p, units = load_pair(TWO_UNITS, "[crates]\na = { transient = false }\nb = { transient = false }\n")
    sites = boundary_call_sites(build_call_graph(p), units)
    by_dir = {s.direction: s for s in sites}
    assert sorted(by_dir) == ["root->unit", "unit->unit"]
    assert by_dir["unit->unit"].caller_unit == 0 and by_dir["unit->unit"].callee_unit == 1


def test_call_into_private_member_from_outside():
    src = """
    crate c {
        pub fn foo() -> i32 { _0 = const 1; return; }
        pub fn bar() -> i32 { _0 = const 2; return; }
    }
    fn main() { _0 = call c::bar(); return; }
    """
    p, units = load_pair(src, "[functions]\nc::foo = { transient = false }\n[functions]\n")
    assert boundary_call_sites(build_call_graph(p), units) == []
    p, units = load_pair(src.replace("pub fn bar", "fn bar").replace("call c::bar", "call c::foo"),
                         "[crates]\nc = { transient = false }\n")
    assert len(boundary_call_sites(build_call_graph(p), units)) == 1
    # a unit whose callee is not an entry point: calling a private member from root
    src2 = "crate c { pub fn foo() -> i32 { _0 = const 1; return; } }\ncrate d { pub fn g() -> i32 { _0 = call c::foo(); return; } }\nfn main() { _0 = call d::g(); return; }"
    p = parse_program(src2)
    units = resolve_units(parse_spec("[crates]\nc = { transient = false }\n"), p)
    object.__setattr__(units[0], "entry", frozenset())
    with pytest.raises(VisibilityError):
        boundary_call_sites(build_call_graph(p), units)


SHARED_HELPER = """
crate u { pub fn f() -> i32 { _0 = call util::h(); return; } }
crate util { pub fn h() -> i32 { _0 = const 1; return; } }
fn main() { let _1: i32; _1 = call util::h(); _0 = call u::f(); return; }
"""


def test_helper_contexts():
    p, units = load_pair(SHARED_HELPER, "[crates]\nu = { transient = false }\n")
    ctx = function_contexts(build_call_graph(p), units)
    assert ctx["util::h"] == {ROOT_UNIT, 0}
    assert ctx["u::f"] == {0}
    assert ctx["main::main"] == {ROOT_UNIT}
    assert units[0].helpers == {"util::h"}


def test_boundary_sites_partition_edges():
    for seed in range(60):
        g = generate(seed)
        p = g.program
        units = resolve_units(g.spec, p)
        cg = build_call_graph(p)
        ctx = function_contexts(cg, units)
        owner = {f: u.unit_id for u in units for f in u.declared}
        sites = {(s.edge, s.caller_unit) for s in boundary_call_sites(cg, units)}
        for e in cg.edges:
            for c in ctx[e.caller]:
                crossing = e.callee in owner and owner[e.callee] != c
                assert ((e, c) in sites) == crossing
        assert boundary_call_sites(cg, []) == []
