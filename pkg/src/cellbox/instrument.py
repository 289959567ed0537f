"""Boundary instrumentation.

Calls that cross a sandbox boundary are redirected to wrappers. A wrapper is
executed by the monitor's transition layer, not by guest code: it resolves the
callee's domain, enters it, transfers arguments according to a copy plan,
runs the entry function, transfers the return value back and exits.

In ``share`` mode, allocation sites found by the analysis are tagged with the
static id of their shared data domain, and heap handles they produce are
passed across boundaries without copying the heap object.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .analysis import AnalysisResult, SharedDomainPlan, origin_sites
from .callgraph import BoundarySite
from .ir import (
    Agg,
    AggregateDef,
    Alloc,
    Block,
    Bool,
    Call,
    I32,
    Program,
    RawBuf,
    Ref,
    TypeExpr,
    Vec,
    format_program,
    parse_program,
)
from .spec import SandboxUnit

log = logging.getLogger(__name__)

MODES = ("copy", "share")
WRAPPER_NS = "__wrap"
SIDECAR_VERSION = 1

BITWISE = "bitwise-copy"
AGGREGATE = "copy-aggregate"
REFERENT = "copy-referent"
PASS_SHARED = "pass-shared"


class CopyPlanError(Exception):
    pass


@dataclass(frozen=True)
class CopyNode:
    action: str
    ty: TypeExpr
    # copy-aggregate: one child per field; copy-referent: ("*", target) or ("[*]", element)
    children: tuple[tuple[str, "CopyNode"], ...] = ()

    @property
    def is_heap(self) -> bool:
        return isinstance(self.ty, Vec)

    def describe(self) -> str:
        if not self.children:
            return self.action
        inner = ", ".join(f"{k}: {c.describe()}" for k, c in self.children)
        return f"{self.action}({inner})"

    def to_json(self) -> dict:
        return {
            "action": self.action,
            "type": str(self.ty),
            "children": [[k, c.to_json()] for k, c in self.children],
        }

    @classmethod
    def from_json(cls, data: dict) -> "CopyNode":
        from .ir.parser import _Parser

        ty = _Parser(data["type"]).type_expr()
        return cls(data["action"], ty, tuple((k, cls.from_json(c)) for k, c in data["children"]))


def _has_ref(structs: dict[str, AggregateDef], ty: TypeExpr, seen=frozenset()) -> bool:
    if isinstance(ty, Ref):
        return True
    if isinstance(ty, Vec):
        return _has_ref(structs, ty.elem, seen)
    if isinstance(ty, Agg) and ty.name not in seen and ty.name in structs:
        return any(_has_ref(structs, t, seen | {ty.name}) for _, t in structs[ty.name].fields)
    return False


def copy_plan_for_type(
    t: TypeExpr,
    mode: str,
    plan: Optional[SharedDomainPlan],
    origin: Iterable[tuple[str, int]],
    structs: dict[str, AggregateDef],
    warnings: Optional[list[str]] = None,
    _seen: frozenset[str] = frozenset(),
) -> CopyNode:
    origin = frozenset(origin)
    if isinstance(t, (Bool, I32)):
        return CopyNode(BITWISE, t)
    if isinstance(t, RawBuf):
        if mode == "copy":
            raise CopyPlanError("rawbuf handle has no type information to copy")
        return CopyNode(BITWISE, t)
    if isinstance(t, Agg):
        if t.name in _seen:
            raise CopyPlanError(f"recursive type {t.name} cannot be copied")
        fields = structs[t.name].fields
        return CopyNode(
            AGGREGATE,
            t,
            tuple(
                (n, copy_plan_for_type(ft, mode, plan, origin, structs, warnings, _seen | {t.name}))
                for n, ft in fields
            ),
        )
    if isinstance(t, Ref):
        return CopyNode(
            REFERENT, t, (("*", copy_plan_for_type(t.target, mode, plan, origin, structs, warnings, _seen)),)
        )
    if isinstance(t, Vec):
        if mode == "share":
            covered = plan is not None and plan.covers(origin)
            if covered and not _has_ref(structs, t.elem):
                return CopyNode(PASS_SHARED, t)
            if warnings is not None:
                why = "holds references" if covered else "some allocation sites are not in a shared domain"
                warnings.append(f"{t}: falling back to copy ({why})")
        return CopyNode(
            REFERENT, t, (("[*]", copy_plan_for_type(t.elem, mode, plan, origin, structs, warnings, _seen)),)
        )
    raise CopyPlanError(f"unsupported type {t}")  # pragma: no cover


@dataclass(frozen=True)
class WrapperDef:
    path: str
    target: str
    unit: int
    transient: bool
    params: tuple[CopyNode, ...]
    ret: CopyNode

    def steps(self) -> list[str]:
        """Abstract step sequence executed by the transition layer."""
        out = ["resolve-domain", "enter"]
        out += [f"copy-arg{i + 1}" for i in range(len(self.params))]
        out += ["call", "copy-return", "copy-back", "exit"]
        if self.transient:
            out.append("destroy")
        return out


@dataclass(frozen=True)
class UnitInfo:
    unit_id: int
    name: str
    transient: bool
    syscalls: frozenset[str] = frozenset()


@dataclass
class InstrumentedProgram:
    program: Program
    mode: str
    wrappers: dict[str, WrapperDef] = field(default_factory=dict)
    units: list[UnitInfo] = field(default_factory=list)
    shared: dict[int, frozenset[int]] = field(default_factory=dict)
    site_domains: dict[tuple[str, int], int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def unit_of(self) -> dict[str, int]:
        return {w.target: w.unit for w in self.wrappers.values()}

    def sidecar(self) -> dict:
        return {
            "version": SIDECAR_VERSION,
            "mode": self.mode,
            "units": [
                {"id": u.unit_id, "name": u.name, "transient": u.transient, "syscalls": sorted(u.syscalls)}
                for u in self.units
            ],
            "wrappers": [
                {
                    "path": w.path,
                    "target": w.target,
                    "unit": w.unit,
                    "transient": w.transient,
                    "params": [n.to_json() for n in w.params],
                    "ret": w.ret.to_json(),
                }
                for w in self.wrappers.values()
            ],
            "shared_domains": [
                {"id": sid, "participants": sorted(parts)} for sid, parts in sorted(self.shared.items())
            ],
            "alloc_sites": [
                {"function": f, "index": i, "domain": sid} for (f, i), sid in sorted(self.site_domains.items())
            ],
            "warnings": list(self.warnings),
        }

    def sidecar_text(self) -> str:
        return json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n"

    def text(self) -> str:
        return format_program(self.program)

    @classmethod
    def load(cls, program_text: str, sidecar: dict) -> "InstrumentedProgram":
        if sidecar.get("version") != SIDECAR_VERSION:
            raise ValueError(f"unsupported sidecar version {sidecar.get('version')}")
        program = parse_program(program_text)
        wrappers = {}
        for w in sidecar["wrappers"]:
            wrappers[w["path"]] = WrapperDef(
                path=w["path"],
                target=w["target"],
                unit=w["unit"],
                transient=w["transient"],
                params=tuple(CopyNode.from_json(n) for n in w["params"]),
                ret=CopyNode.from_json(w["ret"]),
            )
        return cls(
            program=program,
            mode=sidecar["mode"],
            wrappers=wrappers,
            units=[
                UnitInfo(u["id"], u["name"], u["transient"], frozenset(u["syscalls"])) for u in sidecar["units"]
            ],
            shared={d["id"]: frozenset(d["participants"]) for d in sidecar["shared_domains"]},
            site_domains={(a["function"], a["index"]): a["domain"] for a in sidecar["alloc_sites"]},
            warnings=list(sidecar.get("warnings", [])),
        )


def wrapper_path(target: str) -> str:
    return f"{WRAPPER_NS}::{target.replace('::', '__')}"


def instrument(
    p: Program,
    units: list[SandboxUnit],
    boundary: list[BoundarySite],
    plan: Optional[SharedDomainPlan],
    mode: str,
    origins: Optional[dict[str, set[tuple[str, int]]]] = None,
) -> InstrumentedProgram:
    """Rewrite ``p`` for the given boundary sites.

    ``origins`` maps each entry function to the allocation statements whose
    objects may reach it; without it every planned site is assumed to cover
    the heap handles crossing the boundary.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "share" and plan is None:
        raise ValueError("share mode requires a shared-domain plan")
    by_id = {u.unit_id: u for u in units}
    out = InstrumentedProgram(
        program=p,
        mode=mode,
        units=[UnitInfo(u.unit_id, u.name, u.transient, u.syscalls) for u in units],
    )
    if mode == "share":
        out.shared = {gid: parts for parts, gid in plan.groups.items()}
        out.site_domains = dict(plan.assignment)

    redirect: dict[tuple[str, int], str] = {}
    for site in boundary:
        target = site.edge.callee
        wpath = wrapper_path(target)
        redirect[(site.edge.caller, site.edge.index)] = wpath
        if wpath in out.wrappers:
            continue
        callee = p.functions[target]
        origin = (origins or {}).get(target, set()) if origins is not None else set(plan.assignment if plan else ())
        params = []
        for i, ty in enumerate(callee.params, 1):
            try:
                params.append(copy_plan_for_type(ty, mode, plan, origin, p.structs, out.warnings))
            except CopyPlanError as e:
                raise CopyPlanError(f"{target}: parameter _{i}: {e}") from None
        try:
            ret = copy_plan_for_type(callee.ret, mode, plan, origin, p.structs, out.warnings)
        except CopyPlanError as e:
            raise CopyPlanError(f"{target}: return slot: {e}") from None
        unit = by_id[site.callee_unit]
        out.wrappers[wpath] = WrapperDef(wpath, target, unit.unit_id, unit.transient, tuple(params), ret)

    for w in out.warnings:
        log.warning(w)
    if not redirect and not out.site_domains:
        return out

    functions = {}
    for f in p.functions.values():
        blocks = []
        i = 0
        for b in f.blocks:
            stmts = []
            for s in b.stmts:
                if isinstance(s, Call) and (f.path, i) in redirect:
                    s = dataclasses.replace(s, callee=redirect[(f.path, i)])
                elif isinstance(s, Alloc) and (f.path, i) in out.site_domains:
                    s = dataclasses.replace(s, shared=out.site_domains[(f.path, i)])
                stmts.append(s)
                i += 1
            blocks.append(Block(b.label, tuple(stmts)))
        functions[f.path] = dataclasses.replace(f, blocks=tuple(blocks))
    out.program = Program(
        structs=p.structs,
        crates=p.crates,
        modules=p.modules,
        statics=p.statics,
        functions=functions,
        entry=p.entry,
        wrappers={w.path: w.target for w in out.wrappers.values()},
    )
    return out


def instrument_analysis(result: AnalysisResult, mode: str) -> InstrumentedProgram:
    origins: dict[str, set[tuple[str, int]]] = {}
    for j, site in enumerate(result.boundary):
        origins.setdefault(site.edge.callee, set()).update(origin_sites(result.reach, result.program, j))
    plan = result.plan if mode == "share" else None
    return instrument(result.program, result.units, result.boundary, plan, mode, origins)
