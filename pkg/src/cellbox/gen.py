"""Random well-typed MiniMIR programs with sandbox specs, for differential testing.

Generated programs have at most four functions, no recursion, no raw memory
operations and no statics, so their behaviour does not depend on how memory is
laid out or on which domain instance runs a function. The number of branch
decisions a run can make is at most ``MAX_DECISIONS``, so every program has
at most ``2**MAX_DECISIONS`` execution paths. Every vec is allocated
with ``VEC_LEN`` elements and indexed in range, but a handle may still be
empty (e.g. a vec returned without being set), in which case the program
panics identically in every execution mode.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

from .ir import Program, parse_program
from .spec import SandboxSpec, parse_spec

VEC_LEN = 4
MAX_FUNCTIONS = 4
MAX_STATEMENTS = 12
MAX_BRANCHES = 6
MAX_DECISIONS = 12

STRUCTS = "struct S { a: vec<i32>, n: i32 }\n"
PARAM_TYPES = ("i32", "vec<i32>", "&vec<i32>", "&mut vec<i32>", "S")
RET_TYPES = ("i32", "vec<i32>")
# per-function scratch locals after the parameters
SCRATCH = ("i32", "i32", "vec<i32>", "&vec<i32>", "&mut vec<i32>", "S")


@dataclass
class Generated:
    seed: int
    source: str
    spec_text: str

    @property
    def program(self) -> Program:
        return parse_program(self.source)

    @property
    def spec(self) -> SandboxSpec:
        return parse_spec(self.spec_text)


@dataclass
class _Fn:
    crate: str
    name: str
    params: list[str]
    ret: str
    # upper bound on branch decisions made by one call, including callees
    weight: int = 0

    @property
    def path(self) -> str:
        return f"{self.crate}::{self.name}"


class _Body:
    def __init__(self, rng: random.Random, fn: _Fn, callees: list[_Fn], branches: list[int]):
        self.rng = rng
        self.fn = fn
        self.callees = callees
        self.branches = branches  # shared single-element budget
        self.locals = [fn.ret] + fn.params + list(SCRATCH)
        self.budget = MAX_STATEMENTS - 1  # finish() adds the return-slot assignment
        self.blocks: list[tuple[str, list[str]]] = [("bb0", [])]
        self.labels = 0

    def of(self, ty: str) -> list[int]:
        return [i for i, t in enumerate(self.locals) if t == ty and i > 0]

    # -- places --------------------------------------------------------------

    def vec_read(self) -> str:
        opts = [f"_{i}" for i in self.of("vec<i32>")] + [f"_{i}.a" for i in self.of("S")]
        opts += [f"(*_{i})" for i in self.of("&vec<i32>") + self.of("&mut vec<i32>")]
        return self.rng.choice(opts)

    def vec_write(self) -> str:
        opts = [f"_{i}" for i in self.of("vec<i32>")] + [f"_{i}.a" for i in self.of("S")]
        opts += [f"(*_{i})" for i in self.of("&mut vec<i32>")]
        return self.rng.choice(opts)

    def int_read(self) -> str:
        r = self.rng.random()
        if r < 0.4:
            return f"{self.vec_read()}[{self.rng.randrange(VEC_LEN)}]"
        if r < 0.55 and self.of("S"):
            return f"_{self.rng.choice(self.of('S'))}.n"
        return f"_{self.rng.choice(self.of('i32'))}"

    def int_write(self) -> str:
        r = self.rng.random()
        if r < 0.4:
            return f"{self.vec_write()}[{self.rng.randrange(VEC_LEN)}]"
        if r < 0.55 and self.of("S"):
            return f"_{self.rng.choice(self.of('S'))}.n"
        return f"_{self.rng.choice(self.of('i32'))}"

    # -- statements ----------------------------------------------------------

    def emit(self, stmt: str) -> None:
        self.blocks[-1][1].append(stmt)
        self.budget -= 1

    def prologue(self) -> None:
        ints = self.of("i32")
        self.emit(f"_{ints[-1]} = const {self.rng.randrange(100)}")
        v = self.of("vec<i32>")[-1]
        s = self.of("S")[-1]
        self.emit(f"_{v} = alloc vec<i32>[{VEC_LEN}]")
        self.emit(f"_{s}.a = alloc vec<i32>[{VEC_LEN}]")
        self.emit(f"_{self.of('&vec<i32>')[-1]} = &_{v}")
        self.emit(f"_{self.of('&mut vec<i32>')[-1]} = &mut _{s}.a")

    def affordable(self) -> list[_Fn]:
        return [g for g in self.callees if self.fn.weight + g.weight <= MAX_DECISIONS]

    def call(self) -> None:
        g = self.rng.choice(self.affordable())
        self.fn.weight += g.weight
        args = []
        for t in g.params:
            if t == "i32":
                args.append(self.int_read())
            elif t == "vec<i32>":
                args.append(self.vec_read())
            elif t == "S":
                args.append(f"_{self.rng.choice(self.of('S'))}")
            elif t == "&vec<i32>":
                args.append(f"_{self.rng.choice(self.of('&vec<i32>') + self.of('&mut vec<i32>'))}")
            else:
                args.append(f"_{self.rng.choice(self.of('&mut vec<i32>'))}")
        dst = self.int_write() if g.ret == "i32" else self.vec_write()
        self.emit(f"{dst} = call {g.path}({', '.join(args)})")

    def statement(self) -> None:
        rng = self.rng
        kinds = ["const", "add", "copy", "alloc", "vecmove", "ref", "write"]
        if self.affordable():
            kinds += ["call", "call"]
        k = rng.choice(kinds)
        if k == "const":
            self.emit(f"{self.int_write()} = const {rng.randrange(-50, 50)}")
        elif k == "add":
            rhs = str(rng.randrange(10)) if rng.random() < 0.5 else self.int_read()
            self.emit(f"{self.int_write()} = add {self.int_read()}, {rhs}")
        elif k == "copy":
            self.emit(f"{self.int_write()} = {self.int_read()}")
        elif k == "alloc":
            self.emit(f"{self.vec_write()} = alloc vec<i32>[{VEC_LEN}]")
        elif k == "vecmove":
            self.emit(f"{self.vec_write()} = {self.vec_read()}")
        elif k == "ref":
            targets = [f"_{i}" for i in self.of("vec<i32>")] + [f"_{i}.a" for i in self.of("S")]
            if rng.random() < 0.5:
                self.emit(f"_{rng.choice(self.of('&vec<i32>'))} = &{rng.choice(targets)}")
            else:
                self.emit(f"_{rng.choice(self.of('&mut vec<i32>'))} = &mut {rng.choice(targets)}")
        elif k == "write":
            self.emit(f"_{rng.choice(self.of('i32'))} = syscall write({self.int_read()})")
        else:
            self.call()

    def sequence(self, n: int) -> None:
        for _ in range(n):
            if self.budget <= 0:
                return
            if self.branches[0] > 0 and self.fn.weight < MAX_DECISIONS and self.budget >= 3 and self.rng.random() < 0.2:
                self.diamond()
            else:
                self.statement()

    def label(self) -> str:
        self.labels += 1
        return f"bb{self.labels}"

    def diamond(self) -> None:
        self.branches[0] -= 1
        self.fn.weight += 1
        a, b, join = self.label(), self.label(), self.label()
        self.blocks[-1][1].append(f"branch {a}, {b}")
        for arm in (a, b):
            self.blocks.append((arm, []))
            self.sequence(self.rng.randint(1, 2))
            self.blocks[-1][1].append(f"goto {join}")
        self.blocks.append((join, []))

    def finish(self) -> str:
        if self.fn.ret == "i32":
            self.blocks[-1][1].append(f"_0 = {self.int_read()}")
        else:
            self.blocks[-1][1].append(f"_0 = {self.vec_read()}")
        self.blocks[-1][1].append("return")
        params = ", ".join(f"_{i}: {t}" for i, t in enumerate(self.fn.params, 1))
        out = [f"    pub fn {self.fn.name}({params}) -> {self.fn.ret} {{"]
        for i in range(len(self.fn.params) + 1, len(self.locals)):
            out.append(f"        let _{i}: {self.locals[i]};")
        for label, stmts in self.blocks:
            out.append(f"    {label}:")
            out += [f"        {s};" for s in stmts]
        out.append("    }")
        return "\n".join(out)


def generate(seed: int) -> Generated:
    rng = random.Random(seed)
    n = rng.randint(2, MAX_FUNCTIONS)
    crates = ["app", "lib", "ext", "util"]
    fns = [_Fn("app", "main", [], "i32")]
    for i in range(1, n):
        crate = rng.choice(crates)
        params = [rng.choice(PARAM_TYPES) for _ in range(rng.randint(0, 2))]
        fns.append(_Fn(crate, f"f{i}", params, rng.choice(RET_TYPES)))
    branches = [MAX_BRANCHES]
    # callees first, so their decision weights are known at each call
    text: dict[int, str] = {}
    for i in reversed(range(len(fns))):
        body = _Body(rng, fns[i], fns[i + 1 :], branches)
        body.prologue()
        body.sequence(MAX_STATEMENTS)
        has_call = any("call" in s for _, b in body.blocks for s in b)
        if body.budget > 0 and not has_call and body.affordable():
            body.call()  # keep every generated function reachable more often than not
        text[i] = body.finish()
    bodies: dict[str, list[str]] = {}
    for i, fn in enumerate(fns):
        bodies.setdefault(fn.crate, []).append(text[i])
    source = STRUCTS + "".join(
        f"crate {c} {{\n" + "\n".join(items) + "\n}\n" for c, items in bodies.items()
    )
    units = [c for c in ("lib", "ext") if c in bodies]
    spec_lines = ["[crates]"] + [
        f'{c} = {{ transient = {str(rng.random() < 0.5).lower()}, syscalls = ["write"] }}' for c in units
    ]
    return Generated(seed, source, "\n".join(spec_lines) + "\n")


def corpus(n: int, start: int = 0) -> list[Generated]:
    return [generate(s) for s in range(start, start + n)]


def write_corpus(directory, n: int, start: int = 0) -> list[Path]:
    """Write ``gen<seed>.mir`` and ``gen<seed>.spec`` for ``n`` seeds."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for g in corpus(n, start):
        prog = out / f"gen{g.seed:04d}.mir"
        prog.write_text(g.source, encoding="utf-8")
        prog.with_suffix(".spec").write_text(g.spec_text, encoding="utf-8")
        paths.append(prog)
    return paths
