"""Deterministic formatter for MiniMIR programs."""

from __future__ import annotations

from .nodes import (
    Add,
    Addr,
    AddrOf,
    Alloc,
    Assign,
    Branch,
    Call,
    Const,
    Deref,
    Field,
    Function,
    Goto,
    Index,
    Place,
    Program,
    RawAddr,
    RawLoad,
    RawStore,
    Return,
    Statement,
    Syscall,
    Use,
)

INDENT = "    "


def format_place(place: Place) -> str:
    text = f"@{place.base}" if place.is_static else f"_{place.base}"
    wrapped = False  # true when text is a bare deref needing parens before a postfix
    for p in place.proj:
        if isinstance(p, Deref):
            text = "*" + text
            wrapped = True
            continue
        if wrapped:
            text = f"({text})"
            wrapped = False
        text += f".{p.name}" if isinstance(p, Field) else f"[{p.index}]"
    return text


def _operand(op) -> str:
    return str(op) if isinstance(op, int) else format_place(op)


def _raw_addr(a: RawAddr) -> str:
    if a.offset < 0:
        return f"[{format_place(a.place)} - {-a.offset}]"
    return f"[{format_place(a.place)} + {a.offset}]"


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_statement(s: Statement) -> str:
    if isinstance(s, Assign):
        src = s.src
        if isinstance(src, Use):
            rhs = format_place(src.place)
        elif isinstance(src, AddrOf):
            rhs = ("&mut " if src.mut else "&") + format_place(src.place)
        elif isinstance(src, Const):
            v = src.value
            rhs = "const " + (("true" if v else "false") if isinstance(v, bool) else str(v))
        elif isinstance(src, Addr):
            rhs = "addr " + format_place(src.place)
        elif isinstance(src, Add):
            rhs = f"add {_operand(src.lhs)}, {_operand(src.rhs)}"
        else:  # pragma: no cover
            raise TypeError(src)
        return f"{format_place(s.dst)} = {rhs};"
    if isinstance(s, Call):
        args = ", ".join(format_place(a) for a in s.args)
        return f"{format_place(s.dst)} = call {s.callee}({args});"
    if isinstance(s, Alloc):
        tail = f" in shared {s.shared}" if s.shared is not None else ""
        return f"{format_place(s.dst)} = alloc {s.container}<{s.elem}>[{s.length}]{tail};"
    if isinstance(s, Syscall):
        args = ", ".join(
            _quote(a) if isinstance(a, str) else _operand(a) for a in s.args
        )
        return f"{format_place(s.dst)} = syscall {s.name}({args});"
    if isinstance(s, Branch):
        return f"branch {s.targets[0]}, {s.targets[1]};"
    if isinstance(s, Goto):
        return f"goto {s.target};"
    if isinstance(s, Return):
        return "return;"
    if isinstance(s, RawStore):
        return f"rawstore {_raw_addr(s.addr)}, {format_place(s.src)};"
    if isinstance(s, RawLoad):
        return f"{format_place(s.dst)} = rawload {_raw_addr(s.addr)};"
    raise TypeError(s)  # pragma: no cover


def _format_function(f: Function, depth: int) -> list[str]:
    pad = INDENT * depth
    params = ", ".join(f"_{i + 1}: {t}" for i, t in enumerate(f.params))
    vis = "pub " if f.public else ""
    lines = [f"{pad}{vis}fn {f.name}({params}) -> {f.ret} {{"]
    for i in range(f.n_params + 1, len(f.locals)):
        lines.append(f"{pad}{INDENT}let _{i}: {f.locals[i]};")
    for block in f.blocks:
        lines.append(f"{pad}{block.label}:")
        for s in block.stmts:
            lines.append(f"{pad}{INDENT}{format_statement(s)}")
    lines.append(f"{pad}}}")
    return lines


def _format_module(p: Program, module: str, depth: int) -> list[str]:
    pad = INDENT * depth
    lines: list[str] = []
    for path, ty in p.statics.items():
        if path.rsplit("::", 1)[0] == module:
            lines.append(f"{pad}static {path.rsplit('::', 1)[1]}: {ty};")
    owners: list[str] = []
    for f in p.functions.values():
        if f.module != module:
            continue
        if f.owner is None:
            lines.extend(_format_function(f, depth))
        elif f.owner not in owners:
            owners.append(f.owner)
    for owner in owners:
        lines.append(f"{pad}impl {owner} {{")
        for f in p.functions.values():
            if f.module == module and f.owner == owner:
                lines.extend(_format_function(f, depth + 1))
        lines.append(f"{pad}}}")
    for sub in sorted(m for m in p.modules if m.rsplit("::", 1)[0] == module):
        lines.append(f"{pad}mod {sub.rsplit('::', 1)[1]} {{")
        lines.extend(_format_module(p, sub, depth + 1))
        lines.append(f"{pad}}}")
    return lines


def format_program(p: Program) -> str:
    lines: list[str] = []
    for agg in p.structs.values():
        fields = ", ".join(f"{n}: {t}" for n, t in agg.fields)
        lines.append(f"struct {agg.name} {{ {fields} }}")
    for crate in p.crates:
        lines.append(f"crate {crate} {{")
        lines.extend(_format_module(p, crate, 1))
        lines.append("}")
    for wpath, target in p.wrappers.items():
        lines.append(f"wrapper {wpath} = {target};")
    if p.entry:
        lines.append(f"entry {p.entry};")
    return "\n".join(lines) + "\n"
