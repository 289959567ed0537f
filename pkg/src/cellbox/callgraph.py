"""Whole-program call graph and boundary call-site classification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

from .ir import Call, Program
from .runtime import ROOT_UNIT

if TYPE_CHECKING:
    from .spec import SandboxUnit


class VisibilityError(Exception):
    """A call from outside a unit targets one of its non-entry members."""


@dataclass(frozen=True, order=True)
class Edge:
    caller: str
    index: int
    callee: str

    def __str__(self) -> str:
        return f"{self.caller}#{self.index} -> {self.callee}"


@dataclass(frozen=True)
class CallGraph:
    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]
    entry: str

    def callees(self, f: str) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.edges:
            if e.caller == f:
                seen.setdefault(e.callee)
        return list(seen)

    def edges_from(self, f: str) -> list[Edge]:
        return [e for e in self.edges if e.caller == f]

    def to_edge_list(self) -> str:
        return "".join(f"{e.caller}\t{e.index}\t{e.callee}\n" for e in self.edges)

    def to_dot(self) -> str:
        lines = ["digraph callgraph {"]
        lines += [f'  "{n}";' for n in self.nodes]
        lines += [f'  "{e.caller}" -> "{e.callee}" [label="{e.index}"];' for e in self.edges]
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_call_graph(p: Program) -> CallGraph:
    edges = []
    for f in p.functions.values():
        for i, s in enumerate(f.statements()):
            if isinstance(s, Call):
                edges.append(Edge(f.path, i, p.target_of(s.callee)))
    return CallGraph(tuple(p.functions), tuple(edges), p.entry)


@dataclass(frozen=True)
class BoundarySite:
    edge: Edge
    caller_unit: int  # ROOT_UNIT for the root domain
    callee_unit: int

    @property
    def direction(self) -> str:
        return "root->unit" if self.caller_unit == ROOT_UNIT else "unit->unit"

    @property
    def participants(self) -> frozenset[int]:
        return frozenset({self.caller_unit, self.callee_unit})


def unit_of(units: Iterable["SandboxUnit"]) -> dict[str, int]:
    """Function path -> id of the unit that syntactically declares it."""
    return {f: u.unit_id for u in units for f in u.declared}


def function_contexts(cg: CallGraph, units: list["SandboxUnit"]) -> dict[str, frozenset[int]]:
    """Domains (unit ids or ROOT_UNIT) each function may execute in.

    Functions not declared by any unit run in whichever domain calls them.
    Unreachable functions are attributed to the root domain.
    """
    owner = unit_of(units)
    contexts: dict[str, set[int]] = {n: set() for n in cg.nodes}
    starts = [(cg.entry, ROOT_UNIT)] + [(f, u.unit_id) for u in units for f in sorted(u.declared)]
    for start, ctx in starts:
        if start not in contexts:
            continue
        work = [start]
        contexts[start].add(ctx)
        while work:
            f = work.pop()
            for callee in cg.callees(f):
                target = owner.get(callee)
                if target is not None and target != ctx:
                    continue  # boundary: the callee runs in its own unit
                if ctx not in contexts[callee]:
                    contexts[callee].add(ctx)
                    work.append(callee)
    return {
        f: frozenset(c) if c else frozenset({owner.get(f, ROOT_UNIT)})
        for f, c in contexts.items()
    }


def boundary_call_sites(cg: CallGraph, units: list["SandboxUnit"]) -> list[BoundarySite]:
    owner = unit_of(units)
    by_id = {u.unit_id: u for u in units}
    contexts = function_contexts(cg, units)
    sites = []
    for e in cg.edges:
        callee_unit = owner.get(e.callee)
        if callee_unit is None:
            continue
        for ctx in sorted(contexts[e.caller]):
            if ctx == callee_unit:
                continue
            if e.callee not in by_id[callee_unit].entry:
                raise VisibilityError(
                    f"{e}: {e.callee} is not an entry point of unit {by_id[callee_unit].name}"
                )
            sites.append(BoundarySite(e, ctx, callee_unit))
    return sites
