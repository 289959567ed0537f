from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .nodes import (
    Add,
    Addr,
    AddrOf,
    Agg,
    Alloc,
    Assign,
    Bool,
    Branch,
    Call,
    Const,
    Deref,
    Field,
    Function,
    Goto,
    I32,
    Index,
    Place,
    Program,
    RawAddr,
    RawBuf,
    RawLoad,
    RawStore,
    Ref,
    Syscall,
    TypeExpr,
    Use,
    Vec,
)


class PlaceTypeError(Exception):
    pass


@dataclass(frozen=True)
class Diagnostic:
    function: Optional[str]
    index: Optional[int]
    message: str

    def __str__(self) -> str:
        if self.function is None:
            return self.message
        if self.index is None:
            return f"{self.function}: {self.message}"
        return f"{self.function}#{self.index}: {self.message}"


def base_type(p: Program, f: Function, place: Place) -> TypeExpr:
    if place.is_static:
        if place.base not in p.statics:
            raise PlaceTypeError(f"unknown static @{place.base}")
        return p.statics[place.base]
    if not 0 <= place.base < len(f.locals):
        raise PlaceTypeError(f"undeclared local _{place.base}")
    return f.locals[place.base]


def project_type(p: Program, ty: TypeExpr, proj, raw: bool = False) -> TypeExpr:
    """Type after one projection. ``raw`` permits deref of an integer address."""
    if isinstance(proj, Deref):
        if isinstance(ty, Ref):
            return ty.target
        if raw and isinstance(ty, (I32, RawBuf)):
            return I32()
        raise PlaceTypeError(f"cannot dereference {ty}")
    if isinstance(proj, Field):
        if isinstance(ty, Agg) and ty.name in p.structs:
            ft = p.structs[ty.name].field_type(proj.name)
            if ft is not None:
                return ft
        raise PlaceTypeError(f"no field .{proj.name} on {ty}")
    if isinstance(proj, Index):
        if isinstance(ty, Vec):
            if proj.index < 0:
                raise PlaceTypeError(f"negative index [{proj.index}]")
            return ty.elem
        raise PlaceTypeError(f"cannot index {ty}")
    raise PlaceTypeError(f"bad projection {proj!r}")  # pragma: no cover


def place_type(p: Program, f: Function, place: Place, raw: bool = False) -> TypeExpr:
    ty = base_type(p, f, place)
    last = len(place.proj) - 1
    for i, proj in enumerate(place.proj):
        ty = project_type(p, ty, proj, raw=raw and i == last)
    return ty


def assignable(dst: TypeExpr, src: TypeExpr) -> bool:
    if dst == src:
        return True
    return isinstance(dst, Ref) and isinstance(src, Ref) and not dst.mut and src.mut and dst.target == src.target


def is_scalar_slot(ty: TypeExpr) -> bool:
    return isinstance(ty, (Bool, I32, RawBuf, Ref))


def _type_diags(p: Program, ty: TypeExpr) -> list[str]:
    if isinstance(ty, Agg):
        return [] if ty.name in p.structs else [f"unresolved aggregate {ty.name}"]
    if isinstance(ty, Vec):
        return _type_diags(p, ty.elem)
    if isinstance(ty, Ref):
        return _type_diags(p, ty.target)
    return []


def _contains_handle(p: Program, ty: TypeExpr, seen=frozenset()) -> bool:
    if isinstance(ty, (Vec, Ref)):
        return True
    if isinstance(ty, Agg) and ty.name in p.structs and ty.name not in seen:
        return any(_contains_handle(p, t, seen | {ty.name}) for _, t in p.structs[ty.name].fields)
    return False


def _recursive_structs(p: Program) -> list[str]:
    """Aggregates that contain themselves by value (not through vec/ref)."""
    bad = []
    for name in p.structs:
        stack = [t for _, t in p.structs[name].fields]
        seen: set[str] = set()
        while stack:
            t = stack.pop()
            if isinstance(t, Agg) and t.name in p.structs:
                if t.name == name:
                    bad.append(name)
                    break
                if t.name not in seen:
                    seen.add(t.name)
                    stack.extend(ft for _, ft in p.structs[t.name].fields)
    return bad


def validate_program(p: Program) -> list[Diagnostic]:
    from ..runtime import SYSCALLS

    diags: list[Diagnostic] = []

    def top(msg: str) -> None:
        diags.append(Diagnostic(None, None, msg))

    for agg in p.structs.values():
        for fname, ftype in agg.fields:
            for m in _type_diags(p, ftype):
                top(f"struct {agg.name}.{fname}: {m}")
    for name in _recursive_structs(p):
        top(f"struct {name} contains itself by value")
    for path, ty in p.statics.items():
        for m in _type_diags(p, ty):
            top(f"static {path}: {m}")
        if _contains_handle(p, ty):
            top(f"static {path}: type {ty} may not contain vec or reference handles")
    for wpath, target in p.wrappers.items():
        if target not in p.functions:
            top(f"wrapper {wpath}: unresolved function path {target}")

    if not p.entry:
        top("no entry function (expected a single crate-root `main`)")
    elif p.entry not in p.functions:
        top(f"entry function {p.entry} not found")
    elif p.functions[p.entry].n_params:
        top(f"entry function {p.entry} must take no parameters")

    for f in p.functions.values():
        for i, ty in enumerate(f.locals):
            for m in _type_diags(p, ty):
                diags.append(Diagnostic(f.path, None, f"local _{i}: {m}"))
        labels = {b.label for b in f.blocks}
        for idx, s in enumerate(f.statements()):
            for m in _statement_diags(p, f, s, labels, SYSCALLS):
                diags.append(Diagnostic(f.path, idx, m))
    return diags


def _statement_diags(p: Program, f: Function, s, labels: set[str], syscalls) -> list[str]:
    out: list[str] = []

    def ty(place: Place, raw: bool = False) -> Optional[TypeExpr]:
        try:
            return place_type(p, f, place, raw=raw)
        except PlaceTypeError as e:
            out.append(f"{e} in {place}")
            return None

    def operand(op) -> None:
        if isinstance(op, Place):
            t = ty(op)
            if t is not None and t != I32():
                out.append(f"operand {op} must be i32, found {t}")

    if isinstance(s, Assign):
        dt = ty(s.dst)
        src = s.src
        if isinstance(src, Use):
            st = ty(src.place)
            if dt is not None and st is not None and not assignable(dt, st):
                out.append(f"cannot assign {st} to {dt}")
        elif isinstance(src, AddrOf):
            st = ty(src.place)
            if dt is not None and st is not None and not assignable(dt, Ref(st, src.mut)):
                out.append(f"cannot assign {Ref(st, src.mut)} to {dt}")
        elif isinstance(src, Const):
            want = Bool() if isinstance(src.value, bool) else I32()
            if dt is not None and dt != want:
                out.append(f"cannot assign {want} constant to {dt}")
        elif isinstance(src, Addr):
            ty(src.place)
            if dt is not None and not isinstance(dt, (I32, RawBuf)):
                out.append(f"addr result must land in i32 or rawbuf, not {dt}")
        elif isinstance(src, Add):
            operand(src.lhs)
            operand(src.rhs)
            if dt is not None and dt != I32():
                out.append(f"add result must be i32, not {dt}")
    elif isinstance(s, Call):
        target = p.target_of(s.callee)
        callee = p.functions.get(target)
        dt = ty(s.dst)
        arg_types = [ty(a) for a in s.args]
        if callee is None:
            out.append(f"unresolved function path {s.callee}")
            return out
        if s.callee not in p.wrappers and not callee.public and callee.crate != f.crate:
            out.append(f"call to private function {callee.path} from crate {f.crate}")
        if len(s.args) != callee.n_params:
            out.append(f"{callee.path} takes {callee.n_params} arguments, {len(s.args)} given")
        else:
            for a, at, pt in zip(s.args, arg_types, callee.params):
                if at is not None and not assignable(pt, at):
                    out.append(f"argument {a}: expected {pt}, found {at}")
        if dt is not None and not assignable(dt, callee.ret):
            out.append(f"cannot assign {callee.ret} result of {callee.path} to {dt}")
    elif isinstance(s, Alloc):
        dt = ty(s.dst)
        for m in _type_diags(p, s.elem):
            out.append(m)
        if dt is not None and dt != Vec(s.elem):
            out.append(f"alloc of {Vec(s.elem)} into {dt}")
        if s.length < 0:
            out.append("negative alloc length")
    elif isinstance(s, Syscall):
        dt = ty(s.dst)
        if s.name not in syscalls:
            out.append(f"unknown syscall {s.name}")
        if dt is not None and dt != I32():
            out.append(f"syscall result must be i32, not {dt}")
        for a in s.args:
            if isinstance(a, Place):
                at = ty(a)
                if at is not None and not is_scalar_slot(at):
                    out.append(f"syscall argument {a} must be scalar")
    elif isinstance(s, Branch):
        out.extend(f"unknown label {t}" for t in s.targets if t not in labels)
    elif isinstance(s, Goto):
        if s.target not in labels:
            out.append(f"unknown label {s.target}")
    elif isinstance(s, (RawStore, RawLoad)):
        addr: RawAddr = s.addr
        ty(addr.place, raw=True)
        val = s.src if isinstance(s, RawStore) else s.dst
        vt = ty(val)
        if vt is not None and not is_scalar_slot(vt):
            out.append(f"raw access moves one slot; {val} has type {vt}")
    return out
