"""Sandbox specification files and their resolution against a program.

The file format is sectioned key/value::

    containers = ["vec"]            # optional, before the first section
    [functions]                     // or [types] / [crates]
    foo = { transient = true }
    app::bar = { transient = false, syscalls = ["write"] }

A module path listed under ``[crates]`` sandboxes that module.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .ir import Program

SECTIONS = {"functions": "function", "types": "type", "crates": "crate"}
DEFAULT_CONTAINERS = ("vec",)


class SpecError(Exception):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class UnitDecl:
    kind: str  # function | type | crate
    path: str
    transient: bool = False


@dataclass
class SandboxSpec:
    units: list[UnitDecl] = field(default_factory=list)
    containers: tuple[str, ...] = DEFAULT_CONTAINERS
    syscall_allow: dict[str, tuple[str, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class SandboxUnit:
    unit_id: int
    decl: UnitDecl
    entry: frozenset[str]
    # functions syntactically inside the unit
    declared: frozenset[str]
    # non-unit functions reachable from the unit; each unit runs its own copy
    helpers: frozenset[str] = frozenset()
    syscalls: frozenset[str] = frozenset()

    @property
    def members(self) -> frozenset[str]:
        return self.declared | self.helpers

    @property
    def name(self) -> str:
        return self.decl.path

    @property
    def transient(self) -> bool:
        return self.decl.transient


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_COMMENT = re.compile(r"\s*(//|#).*$")
_SECTION = re.compile(r"^\[([A-Za-z_]+)\]$")
_ENTRY = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*(?:::[A-Za-z_][A-Za-z0-9_]*)*)\s*=\s*\{(.*)\}$")
_CONTAINERS = re.compile(r"^containers\s*=\s*\[(.*)\]$")
_KV = re.compile(r"\s*([A-Za-z_]+)\s*=\s*(true|false|\[[^\]]*\]|[^,\s]+)\s*(?:,|$)")
_STRING = re.compile(r'"([^"]*)"')


def _strip(line: str) -> str:
    # comments may not appear inside string literals, which only hold identifiers
    return _COMMENT.sub("", line).strip()


def _string_list(body: str, lineno: int) -> tuple[str, ...]:
    items = [s.strip() for s in body.split(",") if s.strip()]
    out = []
    for item in items:
        m = _STRING.fullmatch(item)
        if m is None:
            raise SpecError(f"expected a quoted string, found {item}", lineno)
        out.append(m.group(1))
    return tuple(out)


def parse_spec(text: str) -> SandboxSpec:
    spec = SandboxSpec()
    section: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("["):
            m = _SECTION.match(line)
            if m is None or m.group(1) not in SECTIONS:
                raise SpecError(f"malformed section header {line!r}", lineno)
            section = SECTIONS[m.group(1)]
            continue
        m = _CONTAINERS.match(line)
        if m and section is None:
            spec.containers = _string_list(m.group(1), lineno)
            continue
        m = _ENTRY.match(line)
        if m is None:
            raise SpecError(f"cannot parse {line!r}", lineno)
        if section is None:
            raise SpecError("unit entry before any section header", lineno)
        path, body = m.group(1), m.group(2).strip()
        if any(u.path == path for u in spec.units):
            raise SpecError(f"duplicate unit {path}", lineno)
        transient = False
        pos = 0
        while pos < len(body):
            kv = _KV.match(body, pos)
            if kv is None:
                raise SpecError(f"cannot parse unit options {body!r}", lineno)
            key, value = kv.group(1), kv.group(2)
            if key == "transient":
                if value not in ("true", "false"):
                    raise SpecError(f"transient must be a boolean, found {value}", lineno)
                transient = value == "true"
            elif key == "syscalls":
                if not value.startswith("["):
                    raise SpecError("syscalls must be a list of strings", lineno)
                spec.syscall_allow[path] = _string_list(value[1:-1], lineno)
            else:
                raise SpecError(f"unknown unit option {key}", lineno)
            pos = kv.end()
        spec.units.append(UnitDecl(section, path, transient))
    _check_overlap(spec.units)
    return spec


def _is_prefix(a: str, b: str) -> bool:
    return b.startswith(a + "::")


def _check_overlap(units: list[UnitDecl]) -> None:
    for a in units:
        for b in units:
            if a is not b and _is_prefix(a.path, b.path):
                raise SpecError(f"units overlap: {b.kind} {b.path} is a member of {a.kind} {a.path}")


# ---------------------------------------------------------------------------
# resolution
# ---------------------------------------------------------------------------


def _matches(full: str, name: str) -> bool:
    return full == name or full.endswith("::" + name)


def _resolve_one(decl: UnitDecl, p: Program) -> frozenset[str]:
    if decl.kind == "function":
        hits = [f for f in p.functions if _matches(f, decl.path)]
        if not hits:
            raise SpecError(f"unresolved function {decl.path}")
        if len(hits) > 1:
            raise SpecError(f"ambiguous function {decl.path}: {', '.join(hits)}; use a qualified path")
        return frozenset(hits)
    if decl.kind == "type":
        owners = {
            f.path.rsplit("::", 1)[0]
            for f in p.functions.values()
            if f.owner is not None and _matches(f.path.rsplit("::", 1)[0], decl.path)
        }
        if not owners:
            raise SpecError(f"unresolved type {decl.path} (no methods)")
        if len(owners) > 1:
            raise SpecError(f"ambiguous type {decl.path}: {', '.join(sorted(owners))}; use a qualified path")
        owner = owners.pop()
        return frozenset(f.path for f in p.functions.values() if f.owner and f.path.rsplit("::", 1)[0] == owner)
    scopes = [c for c in p.crates if c == decl.path] or [m for m in sorted(p.modules) if _matches(m, decl.path)]
    if not scopes:
        raise SpecError(f"unresolved crate or module {decl.path}")
    if len(scopes) > 1:
        raise SpecError(f"ambiguous module {decl.path}: {', '.join(scopes)}; use a qualified path")
    scope = scopes[0]
    members = frozenset(f for f in p.functions if f.startswith(scope + "::"))
    if not members:
        raise SpecError(f"crate or module {decl.path} defines no functions")
    return members


def resolve_units(spec: SandboxSpec, p: Program) -> list[SandboxUnit]:
    from .callgraph import build_call_graph

    declared: list[frozenset[str]] = []
    for decl in spec.units:
        members = _resolve_one(decl, p)
        if p.entry in members:
            raise SpecError(f"unit {decl.path} contains the entry function {p.entry}")
        for other, prev in zip(spec.units, declared):
            if members & prev:
                raise SpecError(f"units {other.path} and {decl.path} overlap")
        declared.append(members)

    owned = {f: i for i, members in enumerate(declared) for f in members}
    cg = build_call_graph(p)
    units = []
    for uid, (decl, members) in enumerate(zip(spec.units, declared)):
        if decl.kind == "function":
            entry = members
        else:
            entry = frozenset(f for f in members if p.functions[f].public)
        helpers: set[str] = set()
        work = list(members)
        while work:
            for callee in cg.callees(work.pop()):
                if callee not in owned and callee not in helpers:
                    helpers.add(callee)
                    work.append(callee)
        units.append(
            SandboxUnit(
                unit_id=uid,
                decl=decl,
                entry=entry,
                declared=members,
                helpers=frozenset(helpers),
                syscalls=frozenset(spec.syscall_allow.get(decl.path, ())),
            )
        )
    return units


def load_spec(path) -> SandboxSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())
