"""Recursive-descent parser for the MiniMIR textual format (see docs/minimir.md)."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Union

from .nodes import (
    DEREF,
    Add,
    Addr,
    AddrOf,
    Agg,
    AggregateDef,
    Alloc,
    Assign,
    Block,
    Bool,
    Branch,
    Call,
    Const,
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
    Return,
    Statement,
    Syscall,
    TypeExpr,
    Use,
    Vec,
)

IMPLICIT_CRATE = "main"


class MiniMIRError(Exception):
    """Raised for syntax errors and (when checking) semantic diagnostics."""

    def __init__(self, message: str, line: int = 0, col: int = 0, diagnostics=None):
        self.line = line
        self.col = col
        self.diagnostics = list(diagnostics or [])
        where = f"{line}:{col}: " if line else ""
        super().__init__(where + message)


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+|//[^\n]*)
  | (?P<str>"(?:[^"\\]|\\.)*")
  | (?P<int>-?\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>::|->|[{}()\[\]<>,;:=&*.+@-])
    """,
    re.VERBOSE,
)

_LOCAL_RE = re.compile(r"_(\d+)$")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    line, line_start = 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise MiniMIRError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        value = m.group()
        if kind != "ws":
            tokens.append(Token(kind, value, line, pos - line_start + 1))
        newlines = value.count("\n")
        if newlines:
            line += newlines
            line_start = pos + value.rfind("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0
        self.structs: dict[str, AggregateDef] = {}
        self.crates: list[str] = []
        self.modules: set[str] = set()
        self.statics: dict[str, TypeExpr] = {}
        self.functions: dict[str, Function] = {}
        self.entry: Optional[str] = None
        self.wrappers: dict[str, str] = {}

    # -- token helpers -----------------------------------------------------

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, expected: str) -> MiniMIRError:
        t = self.tok
        got = t.text or "end of input"
        return MiniMIRError(f"expected {expected}, found {got!r}", t.line, t.col)

    def at(self, text: str) -> bool:
        return self.tok.text == text and self.tok.kind in ("punct", "ident")

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise self.error(repr(text))
        t = self.tok
        self.i += 1
        return t

    def ident(self) -> str:
        if self.tok.kind != "ident":
            raise self.error("identifier")
        t = self.tok
        self.i += 1
        return t.text

    def integer(self) -> int:
        if self.tok.kind != "int":
            raise self.error("integer")
        t = self.tok
        self.i += 1
        return int(t.text)

    def path(self) -> str:
        parts = [self.ident()]
        while self.accept("::"):
            parts.append(self.ident())
        return "::".join(parts)

    # -- items -------------------------------------------------------------

    def program(self) -> Program:
        implicit: list[int] = []
        while self.tok.kind != "eof":
            if self.at("struct"):
                self.struct()
            elif self.at("crate"):
                self.i += 1
                name = self.ident()
                self.add_crate(name)
                self.expect("{")
                self.crate_items(name, name)
                self.expect("}")
            elif self.at("entry"):
                self.i += 1
                self.entry = self.path()
                self.expect(";")
            elif self.at("wrapper"):
                self.i += 1
                wpath = self.path()
                self.expect("=")
                self.wrappers[wpath] = self.path()
                self.expect(";")
            elif self.at("fn") or self.at("pub") or self.at("static") or self.at("mod") or self.at("impl"):
                self.add_crate(IMPLICIT_CRATE)
                self.crate_item(IMPLICIT_CRATE, IMPLICIT_CRATE)
            else:
                raise self.error("'struct', 'crate', 'entry', 'wrapper' or 'fn'")
        entry = self.entry if self.entry is not None else self.default_entry()
        return Program(
            structs=self.structs,
            crates=tuple(self.crates),
            modules=frozenset(self.modules),
            statics=self.statics,
            functions=self.functions,
            entry=entry,
            wrappers=self.wrappers,
        )

    def add_crate(self, name: str) -> None:
        if name not in self.crates:
            self.crates.append(name)

    def default_entry(self) -> str:
        roots = [p for p in self.functions if p.count("::") == 1 and p.endswith("::main")]
        return roots[0] if len(roots) == 1 else ""

    def struct(self) -> None:
        t = self.expect("struct")
        name = self.ident()
        if name in self.structs:
            raise MiniMIRError(f"duplicate struct {name}", t.line, t.col)
        self.expect("{")
        fields: list[tuple[str, TypeExpr]] = []
        while not self.at("}"):
            ft = self.tok
            fname = self.ident()
            if any(f == fname for f, _ in fields):
                raise MiniMIRError(f"duplicate field {fname} in struct {name}", ft.line, ft.col)
            self.expect(":")
            fields.append((fname, self.type_expr()))
            if not self.accept(","):
                break
        self.expect("}")
        self.structs[name] = AggregateDef(name, tuple(fields))

    def crate_items(self, crate: str, module: str) -> None:
        while not self.at("}"):
            if self.tok.kind == "eof":
                raise self.error("'}'")
            self.crate_item(crate, module)

    def crate_item(self, crate: str, module: str) -> None:
        if self.accept("mod"):
            name = self.ident()
            sub = f"{module}::{name}"
            self.modules.add(sub)
            self.expect("{")
            self.crate_items(crate, sub)
            self.expect("}")
        elif self.accept("impl"):
            owner = self.ident()
            self.expect("{")
            while not self.at("}"):
                self.function(f"{module}::{owner}", owner)
            self.expect("}")
        elif self.accept("static"):
            t = self.tok
            name = self.ident()
            self.expect(":")
            path = f"{module}::{name}"
            if path in self.statics:
                raise MiniMIRError(f"duplicate static {path}", t.line, t.col)
            self.statics[path] = self.type_expr()
            self.expect(";")
        else:
            self.function(module, None)

    def function(self, prefix: str, owner: Optional[str]) -> None:
        public = self.accept("pub")
        t = self.expect("fn")
        name = self.ident()
        path = f"{prefix}::{name}"
        if path in self.functions:
            raise MiniMIRError(f"duplicate function {path}", t.line, t.col)
        self.expect("(")
        params: list[TypeExpr] = []
        while not self.at(")"):
            lt = self.tok
            idx = self.local_index()
            if idx != len(params) + 1:
                raise MiniMIRError(f"parameter must be _{len(params) + 1}", lt.line, lt.col)
            self.expect(":")
            params.append(self.type_expr())
            if not self.accept(","):
                break
        self.expect(")")
        ret: TypeExpr = self.type_expr() if self.accept("->") else I32()
        self.expect("{")
        local_types: dict[int, TypeExpr] = {0: ret}
        local_types.update({i + 1: ty for i, ty in enumerate(params)})
        while self.at("let"):
            self.i += 1
            lt = self.tok
            idx = self.local_index()
            if idx in local_types:
                raise MiniMIRError(f"local _{idx} declared twice", lt.line, lt.col)
            self.expect(":")
            local_types[idx] = self.type_expr()
            self.expect(";")
        expected = list(range(len(local_types)))
        if sorted(local_types) != expected:
            missing = next(i for i in expected if i not in local_types)
            raise MiniMIRError(f"locals of {path} must be contiguous; _{missing} is missing", t.line, t.col)
        blocks = self.blocks()
        self.expect("}")
        self.functions[path] = Function(
            path=path,
            public=public,
            owner=owner,
            n_params=len(params),
            locals=tuple(local_types[i] for i in expected),
            blocks=blocks,
        )

    def local_index(self) -> int:
        if self.tok.kind == "ident":
            m = _LOCAL_RE.match(self.tok.text)
            if m:
                self.i += 1
                return int(m.group(1))
        raise self.error("local (_N)")

    # -- types -------------------------------------------------------------

    def type_expr(self) -> TypeExpr:
        if self.accept("&"):
            mut = self.accept("mut")
            return Ref(self.type_expr(), mut)
        name = self.ident()
        if name == "bool":
            return Bool()
        if name == "i32":
            return I32()
        if name == "rawbuf":
            return RawBuf()
        if name == "vec":
            self.expect("<")
            elem = self.type_expr()
            self.expect(">")
            return Vec(elem)
        return Agg(name)

    # -- bodies ------------------------------------------------------------

    def is_label(self) -> bool:
        return (
            self.tok.kind == "ident"
            and not _LOCAL_RE.match(self.tok.text)
            and self.peek().text == ":"
        )

    def blocks(self) -> tuple[Block, ...]:
        blocks: list[Block] = []
        label: Optional[str] = None
        stmts: list[Statement] = []
        while not self.at("}"):
            if self.tok.kind == "eof":
                raise self.error("'}'")
            if self.is_label():
                if label is not None or stmts:
                    blocks.append(Block(label or "bb0", tuple(stmts)))
                lt = self.tok
                label = self.ident()
                if any(b.label == label for b in blocks):
                    raise MiniMIRError(f"duplicate label {label}", lt.line, lt.col)
                self.expect(":")
                stmts = []
            else:
                stmts.append(self.statement())
        if label is not None or stmts or not blocks:
            blocks.append(Block(label or "bb0", tuple(stmts)))
        return tuple(blocks)

    def statement(self) -> Statement:
        if self.accept("return"):
            self.expect(";")
            return Return()
        if self.accept("goto"):
            target = self.ident()
            self.expect(";")
            return Goto(target)
        if self.accept("branch"):
            a = self.ident()
            self.expect(",")
            b = self.ident()
            self.expect(";")
            return Branch((a, b))
        if self.accept("rawstore"):
            addr = self.raw_addr()
            self.expect(",")
            src = self.place()
            self.expect(";")
            return RawStore(addr, src)
        dst = self.place()
        self.expect("=")
        stmt = self.rhs(dst)
        self.expect(";")
        return stmt

    def rhs(self, dst: Place) -> Statement:
        if self.accept("call"):
            callee = self.path()
            self.expect("(")
            args: list[Place] = []
            while not self.at(")"):
                args.append(self.place())
                if not self.accept(","):
                    break
            self.expect(")")
            return Call(dst, callee, tuple(args))
        if self.accept("alloc"):
            kind = self.ident()
            self.expect("<")
            elem = self.type_expr()
            self.expect(">")
            self.expect("[")
            length = self.integer()
            self.expect("]")
            shared = None
            if self.accept("in"):
                self.expect("shared")
                shared = self.integer()
            return Alloc(dst, kind, elem, length, shared)
        if self.accept("syscall"):
            name = self.ident()
            self.expect("(")
            sargs: list[Union[Place, int, str]] = []
            while not self.at(")"):
                if self.tok.kind == "str":
                    sargs.append(_unquote(self.tok.text))
                    self.i += 1
                elif self.tok.kind == "int":
                    sargs.append(self.integer())
                else:
                    sargs.append(self.place())
                if not self.accept(","):
                    break
            self.expect(")")
            return Syscall(dst, name, tuple(sargs))
        if self.accept("rawload"):
            return RawLoad(dst, self.raw_addr())
        return Assign(dst, self.rvalue())

    def rvalue(self):
        if self.accept("const"):
            if self.accept("true"):
                return Const(True)
            if self.accept("false"):
                return Const(False)
            return Const(self.integer())
        if self.accept("addr"):
            return Addr(self.place())
        if self.accept("add"):
            lhs = self.operand()
            self.expect(",")
            return Add(lhs, self.operand())
        if self.accept("&"):
            mut = self.accept("mut")
            return AddrOf(self.place(), mut)
        return Use(self.place())

    def operand(self):
        if self.tok.kind == "int":
            return self.integer()
        return self.place()

    def raw_addr(self) -> RawAddr:
        self.expect("[")
        place = self.place()
        offset = 0
        if self.accept("+"):
            offset = self.integer()
        elif self.accept("-"):
            offset = -self.integer()
        self.expect("]")
        return RawAddr(place, offset)

    def place(self) -> Place:
        if self.accept("*"):
            inner = self.place()
            return inner.project(DEREF)
        if self.accept("("):
            base = self.place()
            self.expect(")")
        elif self.accept("@"):
            base = Place(self.path())
        else:
            base = Place(self.local_index())
        while True:
            if self.accept("."):
                base = base.project(Field(self.ident()))
            elif self.at("[") and self.peek().kind == "int" and self.peek(2).text == "]":
                self.i += 1
                idx = self.integer()
                self.expect("]")
                base = base.project(Index(idx))
            else:
                return base


def _unquote(s: str) -> str:
    return bytes(s[1:-1], "utf-8").decode("unicode_escape")


def parse_program(text: str, check: bool = True) -> Program:
    """Parse MiniMIR source text.

    With ``check`` (the default) the result is also validated and any
    diagnostic is raised as a :class:`MiniMIRError`.
    """
    program = _Parser(text).program()
    if check:
        from .validate import validate_program

        diags = validate_program(program)
        if diags:
            raise MiniMIRError("; ".join(str(d) for d in diags), diagnostics=diags)
    return program
