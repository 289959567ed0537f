"""Cross-boundary allocation-site analysis.

The analysis is a flow-insensitive backward reachability over access paths
("place keys"). Starting from the arguments of every boundary call (and the
return slot of the called entry function), value flow is closed over
assignments, address-of, loads and stores through dereferences, and
parameter/return passing. Every ``alloc`` whose destination ends up in the
set may produce an object that crosses a sandbox boundary.

Dereferences are collapsed: ``(*p).f`` and ``p.f`` share a key, and all
vector elements are summarised by a single ``[*]`` projection.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .callgraph import BoundarySite, function_contexts, build_call_graph
from .ir import (
    Add,
    Addr,
    AddrOf,
    Agg,
    Alloc,
    Assign,
    Call,
    Deref,
    Field,
    Function,
    Index,
    Place,
    Program,
    RawLoad,
    RawStore,
    Ref,
    TypeExpr,
    Use,
    Vec,
)
from .runtime import SHARED_BASE
from .spec import SandboxUnit

ELEM = "[*]"
RULES = ("seed", "assign", "addr-of", "load", "store", "addr-of-load", "call")


@dataclass(frozen=True, order=True)
class PlaceKey:
    function: str  # "" for statics
    base: Union[int, str]
    proj: tuple[str, ...] = ()

    def extend(self, suffix: tuple[str, ...]) -> "PlaceKey":
        return PlaceKey(self.function, self.base, self.proj + suffix)

    @property
    def root(self) -> tuple[str, Union[int, str]]:
        return (self.function, self.base)

    @property
    def is_static(self) -> bool:
        return isinstance(self.base, str)

    def __str__(self) -> str:
        head = f"@{self.base}" if self.is_static else f"{self.function}::_{self.base}"
        return head + "".join("." + p for p in self.proj)


def place_key(function: str, place: Place) -> PlaceKey:
    proj = []
    for p in place.proj:
        if isinstance(p, Field):
            proj.append(p.name)
        elif isinstance(p, Index):
            proj.append(ELEM)
        # derefs collapse
    if place.is_static:
        return PlaceKey("", place.base, tuple(proj))
    return PlaceKey(function, place.base, tuple(proj))


def projection_paths(p: Program, ty: TypeExpr, seen: frozenset[str] = frozenset()) -> list[tuple[str, ...]]:
    """All collapsed projection paths below a value of type ``ty``.

    References are transparent. A path stops before re-entering an aggregate
    it is already inside, which bounds the depth on recursive types.
    """
    while isinstance(ty, Ref):
        ty = ty.target
    out: list[tuple[str, ...]] = [()]
    if isinstance(ty, Vec):
        out += [(ELEM,) + rest for rest in projection_paths(p, ty.elem, seen)]
    elif isinstance(ty, Agg) and ty.name in p.structs and ty.name not in seen:
        inner = seen | {ty.name}
        for fname, ftype in p.structs[ty.name].fields:
            out += [(fname,) + rest for rest in projection_paths(p, ftype, inner)]
    return out


@dataclass(frozen=True)
class FlowEdge:
    """Undirected value-flow link between two keys (suffixes carry over).

    For parameter/return links ``site`` names the call statement and
    ``callee_side`` tells which endpoint (``"a"`` or ``"b"``) is in the callee.
    """

    a: PlaceKey
    b: PlaceKey
    rule: str
    location: tuple[str, int]
    site: Optional[tuple[str, int]] = None
    callee_side: Optional[str] = None

    def __str__(self) -> str:
        return f"{self.a} = {self.b}  [{self.rule} @ {self.location[0]}#{self.location[1]}]"


@dataclass(frozen=True)
class Derivation:
    rule: str
    location: Optional[tuple[str, int]]
    parent: Optional[PlaceKey]


@dataclass
class ReachSet:
    members: frozenset[PlaceKey]
    seeds: frozenset[PlaceKey]
    statements: tuple[FlowEdge, ...]
    provenance: dict[PlaceKey, Derivation]
    # per boundary site: (seeds, members)
    by_site: tuple[tuple[frozenset[PlaceKey], frozenset[PlaceKey]], ...]
    universe: dict[tuple[str, Union[int, str]], frozenset[tuple[str, ...]]]
    iterations: int = 0
    context_filtered: bool = False

    @property
    def place_count(self) -> int:
        return sum(len(v) for v in self.universe.values())

    @property
    def iteration_bound(self) -> int:
        return self.place_count * len(RULES)


# ---------------------------------------------------------------------------
# flow edges
# ---------------------------------------------------------------------------


def _universe(p: Program) -> dict[tuple[str, Union[int, str]], frozenset[tuple[str, ...]]]:
    uni = {}
    for f in p.functions.values():
        for i, ty in enumerate(f.locals):
            uni[(f.path, i)] = frozenset(projection_paths(p, ty))
    for path, ty in p.statics.items():
        uni[("", path)] = frozenset(projection_paths(p, ty))
    return uni


def _has_deref(place: Place) -> bool:
    return any(isinstance(x, Deref) for x in place.proj)


def flow_edges(p: Program) -> list[FlowEdge]:
    edges: list[FlowEdge] = []
    for f in p.functions.values():
        for i, s in enumerate(f.statements()):
            loc = (f.path, i)
            if isinstance(s, Assign):
                src = s.src
                if isinstance(src, Use):
                    rule = "store" if _has_deref(s.dst) else "load" if _has_deref(src.place) else "assign"
                    edges.append(FlowEdge(place_key(f.path, s.dst), place_key(f.path, src.place), rule, loc))
                elif isinstance(src, AddrOf):
                    rule = "addr-of-load" if _has_deref(src.place) else "addr-of"
                    edges.append(FlowEdge(place_key(f.path, s.dst), place_key(f.path, src.place), rule, loc))
                elif isinstance(src, Addr):
                    edges.append(FlowEdge(place_key(f.path, s.dst), place_key(f.path, src.place), "addr-of", loc))
            elif isinstance(s, Call):
                target = p.target_of(s.callee)
                site = loc
                edges.append(
                    FlowEdge(place_key(f.path, s.dst), PlaceKey(target, 0), "call", loc, site, "b")
                )
                for j, arg in enumerate(s.args, 1):
                    edges.append(
                        FlowEdge(PlaceKey(target, j), place_key(f.path, arg), "call", loc, site, "a")
                    )
            elif isinstance(s, RawLoad):
                edges.append(FlowEdge(place_key(f.path, s.dst), place_key(f.path, s.addr.place), "load", loc))
            elif isinstance(s, RawStore):
                edges.append(FlowEdge(place_key(f.path, s.addr.place), place_key(f.path, s.src), "store", loc))
    return edges


class _EdgeIndex:
    def __init__(self, edges: Iterable[FlowEdge]):
        self.by_root: dict[tuple, list[tuple[FlowEdge, str]]] = {}
        for e in edges:
            self.by_root.setdefault(e.a.root, []).append((e, "a"))
            if e.b.root != e.a.root or e.b != e.a:
                self.by_root.setdefault(e.b.root, []).append((e, "b"))

    def neighbours(self, key: PlaceKey):
        """Yield (edge, from-side, other key) for edges whose endpoint prefixes ``key``."""
        for e, side in self.by_root.get(key.root, ()):
            here, there = (e.a, e.b) if side == "a" else (e.b, e.a)
            n = len(here.proj)
            if key.proj[:n] == here.proj:
                yield e, side, there.extend(key.proj[n:])


# ---------------------------------------------------------------------------
# fixed point
# ---------------------------------------------------------------------------


def _seeds_for(p: Program, site: BoundarySite, uni) -> list[tuple[PlaceKey, str, tuple[str, int]]]:
    caller = p.functions[site.edge.caller]
    call = caller.statements()[site.edge.index]
    assert isinstance(call, Call)
    loc = (site.edge.caller, site.edge.index)
    seeds = []
    for arg in call.args:
        seeds.append((place_key(caller.path, arg), "seed", loc))
    seeds.append((PlaceKey(site.edge.callee, 0), "seed", loc))
    return seeds


def _closure(start: Iterable[PlaceKey], uni) -> list[PlaceKey]:
    out = []
    for k in start:
        for suffix in sorted(uni.get(k.root, ())):
            if suffix[: len(k.proj)] == k.proj:
                out.append(PlaceKey(k.function, k.base, suffix))
    return out


def _valid(key: PlaceKey, uni) -> bool:
    return key.proj in uni.get(key.root, ())


def compute_reach(p: Program, units: list[SandboxUnit], sites: list[BoundarySite]) -> ReachSet:
    """Fixed point of the reachability rules, computed once per boundary site."""
    uni = _universe(p)
    edges = flow_edges(p)
    index = _EdgeIndex(edges)
    provenance: dict[PlaceKey, Derivation] = {}
    all_members: set[PlaceKey] = set()
    all_seeds: set[PlaceKey] = set()
    by_site = []
    iterations = 0
    for site in sites:
        members: set[PlaceKey] = set()
        queue: deque[PlaceKey] = deque()

        def add(k: PlaceKey, d: Derivation) -> None:
            if k in members or not _valid(k, uni):
                return
            members.add(k)
            provenance.setdefault(k, d)
            queue.append(k)
            for ext in _closure([k], uni):
                if ext not in members:
                    members.add(ext)
                    provenance.setdefault(ext, Derivation("field", d.location, k))
                    queue.append(ext)

        site_seeds = set()
        for key, rule, loc in _seeds_for(p, site, uni):
            for k in _closure([key], uni):
                site_seeds.add(k)
                add(k, Derivation(rule, loc, None))
        while queue:
            k = queue.popleft()
            iterations += 1
            for e, _side, other in index.neighbours(k):
                add(other, Derivation(e.rule, e.location, k))
        by_site.append((frozenset(site_seeds), frozenset(members)))
        all_members |= members
        all_seeds |= site_seeds
    return ReachSet(
        members=frozenset(all_members),
        seeds=frozenset(all_seeds),
        statements=tuple(edges),
        provenance=provenance,
        by_site=tuple(by_site),
        universe=uni,
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# context filter
# ---------------------------------------------------------------------------

_TOP = ("<any>",)  # recursion collapsed: every call/return pairing accepted
MAX_FILTER_STATES = 200_000


class _Moves:
    """Neighbours of one place, grouped by how they change the call stack."""

    __slots__ = ("plain", "enter", "exit_by_site", "exits")

    def __init__(self, index: _EdgeIndex, key: PlaceKey):
        self.plain: list[PlaceKey] = []
        self.enter: list[tuple[tuple[str, int], PlaceKey]] = []
        self.exit_by_site: dict[tuple[str, int], list[PlaceKey]] = {}
        self.exits: list[PlaceKey] = []
        for e, side, other in index.neighbours(key):
            if e.site is None:
                self.plain.append(other)
            elif side != e.callee_side:
                self.enter.append((e.site, other))
            else:
                self.exit_by_site.setdefault(e.site, []).append(other)
                self.exits.append(other)

    def successors(self, stack: tuple):
        """(place, stack) pairs allowed by matched call/return pairing."""
        for other in self.plain:
            yield other, stack
        if stack == _TOP:
            for _site, other in self.enter:
                yield other, _TOP
            for other in self.exits:
                yield other, _TOP
            return
        for site, other in self.enter:
            yield other, (_TOP if site in stack else stack + (site,))
        if not stack:
            for other in self.exits:
                yield other, stack  # unbalanced return into a caller is realizable
        else:
            for other in self.exit_by_site.get(stack[-1], ()):
                yield other, stack[:-1]


def _realizable(seeds: frozenset[PlaceKey], allowed: frozenset[PlaceKey], index: _EdgeIndex) -> Optional[set[PlaceKey]]:
    below: dict[PlaceKey, list[PlaceKey]] = {}
    for m in allowed:
        for n in range(len(m.proj)):
            below.setdefault(PlaceKey(m.function, m.base, m.proj[:n]), []).append(m)
    moves: dict[PlaceKey, _Moves] = {}
    seen: set[tuple[PlaceKey, tuple]] = set()
    reached: set[PlaceKey] = set()
    queue = deque((s, ()) for s in sorted(seeds))
    seen.update(queue)
    while queue:
        key, stack = queue.popleft()
        reached.add(key)
        m = moves.get(key)
        if m is None:
            m = moves[key] = _Moves(index, key)
        for other, nxt in m.successors(stack):
            if other not in allowed:
                continue
            if other.is_static:
                nxt = ()  # statics are context-free
            for k in [other] + below.get(other, []):
                state = (k, nxt)
                if state not in seen:
                    seen.add(state)
                    if len(seen) > MAX_FILTER_STATES:
                        return None
                    queue.append(state)
    return reached


def filter_context(reach: ReachSet) -> ReachSet:
    """Drop members reachable only along paths with mismatched call/return pairs."""
    index = _EdgeIndex(reach.statements)
    by_site = []
    members: set[PlaceKey] = set()
    for seeds, site_members in reach.by_site:
        kept = _realizable(seeds, site_members, index)
        if kept is None:  # state explosion: keep the context-insensitive result
            kept = set(site_members)
        kept |= seeds
        by_site.append((seeds, frozenset(kept)))
        members |= kept
    return ReachSet(
        members=frozenset(members),
        seeds=reach.seeds,
        statements=reach.statements,
        provenance={k: v for k, v in reach.provenance.items() if k in members},
        by_site=tuple(by_site),
        universe=reach.universe,
        iterations=reach.iterations,
        context_filtered=True,
    )


# ---------------------------------------------------------------------------
# allocation sites and shared domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class AllocSite:
    function: str
    index: int
    container: str
    dest: PlaceKey
    # indices into the boundary-site list whose data may include this object
    crossings: frozenset[int] = field(default=frozenset(), compare=False)

    @property
    def location(self) -> tuple[str, int]:
        return (self.function, self.index)

    def __str__(self) -> str:
        return f"{self.function}#{self.index} {self.container} -> {self.dest}"


def all_allocs(p: Program) -> list[tuple[Function, int, Alloc]]:
    return [
        (f, i, s) for f in p.functions.values() for i, s in enumerate(f.statements()) if isinstance(s, Alloc)
    ]


def find_alloc_sites(reach: ReachSet, p: Program, containers: Iterable[str] = ("vec",)) -> list[AllocSite]:
    kinds = set(containers)
    out = []
    for f, i, s in all_allocs(p):
        if s.container not in kinds:
            continue
        dest = place_key(f.path, s.dst)
        if dest not in reach.members:
            continue
        crossings = frozenset(j for j, (_, m) in enumerate(reach.by_site) if dest in m)
        out.append(AllocSite(f.path, i, s.container, dest, crossings))
    return out


def origin_sites(reach: ReachSet, p: Program, site_index: int) -> set[tuple[str, int]]:
    """Every alloc statement (any container kind) whose object may reach a boundary site."""
    members = reach.by_site[site_index][1]
    return {(f.path, i) for f, i, s in all_allocs(p) if place_key(f.path, s.dst) in members}


@dataclass
class SharedDomainPlan:
    groups: dict[frozenset[int], int] = field(default_factory=dict)
    assignment: dict[tuple[str, int], int] = field(default_factory=dict)

    def participants(self, sid: int) -> frozenset[int]:
        for parts, gid in self.groups.items():
            if gid == sid:
                return parts
        raise KeyError(sid)

    def covers(self, locations: Iterable[tuple[str, int]]) -> bool:
        return all(loc in self.assignment for loc in locations)


def plan_shared_domains(
    sites: list[AllocSite],
    boundary: list[BoundarySite],
    contexts: Optional[dict[str, frozenset[int]]] = None,
    base: int = SHARED_BASE,
) -> SharedDomainPlan:
    """One shared domain per distinct participant set, numbered in first-encounter order.

    ``contexts`` (function -> possible executing domains) adds the domains that
    run the allocation itself, so initialisation never traps.
    """
    plan = SharedDomainPlan()
    for site in sorted(sites, key=lambda s: (s.function, s.index)):
        parts: set[int] = set()
        for j in sorted(site.crossings):
            parts |= boundary[j].participants
        if contexts is not None:
            parts |= contexts.get(site.function, frozenset())
        key = frozenset(parts)
        if key not in plan.groups:
            plan.groups[key] = base + len(plan.groups)
        plan.assignment[site.location] = plan.groups[key]
    return plan


# ---------------------------------------------------------------------------
# whole pipeline
# ---------------------------------------------------------------------------


@dataclass
class AnalysisResult:
    program: Program
    units: list[SandboxUnit]
    boundary: list[BoundarySite]
    reach: ReachSet
    raw_reach: ReachSet
    sites: list[AllocSite]
    plan: SharedDomainPlan
    contexts: dict[str, frozenset[int]]
    containers: tuple[str, ...]

    def shared_helpers(self) -> list[str]:
        """Non-unit functions that run both in the root domain and inside some unit."""
        declared = {f for u in self.units for f in u.declared}
        return [
            f for f, ctx in self.contexts.items()
            if f not in declared and len(ctx) > 1
        ]

    def report(self) -> dict:
        from .runtime import ROOT_UNIT

        def unit_name(uid: int) -> str:
            return "root" if uid == ROOT_UNIT else self.units[uid].name

        return {
            "call_graph": {
                "functions": len(self.program.functions),
                "edges": sum(
                    isinstance(s, Call) for f in self.program.functions.values() for s in f.statements()
                ),
            },
            "units": [
                {
                    "id": u.unit_id,
                    "name": u.name,
                    "kind": u.decl.kind,
                    "transient": u.transient,
                    "entry": sorted(u.entry),
                    "members": sorted(u.declared),
                    "cloned_helpers": sorted(u.helpers),
                }
                for u in self.units
            ],
            "shared_helpers_kept_in_root": self.shared_helpers(),
            "boundary_sites": [
                {
                    "caller": b.edge.caller,
                    "index": b.edge.index,
                    "callee": b.edge.callee,
                    "from": unit_name(b.caller_unit),
                    "to": unit_name(b.callee_unit),
                    "direction": b.direction,
                }
                for b in self.boundary
            ],
            "reach": {
                "size": len(self.reach.members),
                "size_before_context_filter": len(self.raw_reach.members),
                "places": self.reach.place_count,
                "iterations": self.reach.iterations,
                "iteration_bound": self.reach.iteration_bound,
                "members": [
                    {"place": str(k), "rule": self.reach.provenance[k].rule}
                    for k in sorted(self.reach.members, key=str)
                ],
            },
            "alloc_sites": [
                {
                    "function": s.function,
                    "index": s.index,
                    "container": s.container,
                    "dest": str(s.dest),
                    "shared_domain": self.plan.assignment[s.location],
                }
                for s in self.sites
            ],
            "shared_domains": [
                {"id": gid, "participants": sorted(unit_name(u) for u in parts)}
                for parts, gid in self.plan.groups.items()
            ],
        }


def analyze(
    p: Program,
    units: list[SandboxUnit],
    containers: Iterable[str] = ("vec",),
    context_sensitive: bool = True,
) -> AnalysisResult:
    from .callgraph import boundary_call_sites

    cg = build_call_graph(p)
    boundary = boundary_call_sites(cg, units)
    contexts = function_contexts(cg, units)
    raw = compute_reach(p, units, boundary)
    reach = filter_context(raw) if context_sensitive else raw
    containers = tuple(containers)
    sites = find_alloc_sites(reach, p, containers)
    plan = plan_shared_domains(sites, boundary, contexts)
    return AnalysisResult(p, units, boundary, reach, raw, sites, plan, contexts, containers)
