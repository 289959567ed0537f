"""Abstract syntax for MiniMIR programs.

Everything here is immutable except :class:`Program`, whose dict fields keep
declaration order but compare order-insensitively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bool:
    def __str__(self) -> str:
        return "bool"


@dataclass(frozen=True)
class I32:
    def __str__(self) -> str:
        return "i32"


@dataclass(frozen=True)
class RawBuf:
    """Opaque foreign buffer handle. Has no element type, so it cannot be deep-copied."""

    def __str__(self) -> str:
        return "rawbuf"


@dataclass(frozen=True)
class Vec:
    elem: "TypeExpr"

    def __str__(self) -> str:
        return f"vec<{self.elem}>"


@dataclass(frozen=True)
class Ref:
    target: "TypeExpr"
    mut: bool = False

    def __str__(self) -> str:
        return f"&mut {self.target}" if self.mut else f"&{self.target}"


@dataclass(frozen=True)
class Agg:
    name: str

    def __str__(self) -> str:
        return self.name


TypeExpr = Union[Bool, I32, RawBuf, Vec, Ref, Agg]
SCALARS = (Bool, I32, RawBuf)


@dataclass(frozen=True)
class AggregateDef:
    name: str
    fields: tuple[tuple[str, TypeExpr], ...]

    def field_type(self, name: str) -> Optional[TypeExpr]:
        for fname, ftype in self.fields:
            if fname == name:
                return ftype
        return None


# ---------------------------------------------------------------------------
# Places
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Deref:
    def __str__(self) -> str:
        return "*"


@dataclass(frozen=True)
class Field:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Index:
    index: int

    def __str__(self) -> str:
        return f"[{self.index}]"


Projection = Union[Deref, Field, Index]
DEREF = Deref()


@dataclass(frozen=True)
class Place:
    """A local (int index) or a static (qualified path string) plus projections."""

    base: Union[int, str]
    proj: tuple[Projection, ...] = ()

    @property
    def is_static(self) -> bool:
        return isinstance(self.base, str)

    @property
    def is_local_place(self) -> bool:
        return not any(isinstance(p, Deref) for p in self.proj)

    def project(self, *more: Projection) -> "Place":
        return Place(self.base, self.proj + tuple(more))

    def __str__(self) -> str:
        from .printer import format_place

        return format_place(self)


# ---------------------------------------------------------------------------
# Rvalues and statements
# ---------------------------------------------------------------------------

Operand = Union[Place, int]


@dataclass(frozen=True)
class Use:
    place: Place


@dataclass(frozen=True)
class AddrOf:
    place: Place
    mut: bool = False


@dataclass(frozen=True)
class Const:
    value: Union[bool, int]


@dataclass(frozen=True)
class Addr:
    """Raw numeric address of a place (extension: used by vulnerability emulation)."""

    place: Place


@dataclass(frozen=True)
class Add:
    lhs: Operand
    rhs: Operand


Rvalue = Union[Use, AddrOf, Const, Addr, Add]


@dataclass(frozen=True)
class Assign:
    dst: Place
    src: Rvalue


@dataclass(frozen=True)
class Call:
    dst: Place
    callee: str
    args: tuple[Place, ...]


@dataclass(frozen=True)
class Alloc:
    dst: Place
    container: str
    elem: TypeExpr
    length: int
    shared: Optional[int] = None


@dataclass(frozen=True)
class Syscall:
    dst: Place
    name: str
    args: tuple[Union[Place, int, str], ...]


@dataclass(frozen=True)
class Branch:
    targets: tuple[str, str]


@dataclass(frozen=True)
class Goto:
    target: str


@dataclass(frozen=True)
class Return:
    pass


@dataclass(frozen=True)
class RawAddr:
    """``[place + offset]``. A leading deref on an integer reads the integer as an address."""

    place: Place
    offset: int = 0


@dataclass(frozen=True)
class RawStore:
    addr: RawAddr
    src: Place


@dataclass(frozen=True)
class RawLoad:
    dst: Place
    addr: RawAddr


Statement = Union[Assign, Call, Alloc, Syscall, Branch, Goto, Return, RawStore, RawLoad]
TERMINATORS = (Branch, Goto, Return)


@dataclass(frozen=True)
class Block:
    label: str
    stmts: tuple[Statement, ...]


@dataclass(frozen=True)
class Function:
    path: str
    public: bool
    owner: Optional[str]
    n_params: int
    # locals[0] is the return slot, locals[1..n_params] the parameters
    locals: tuple[TypeExpr, ...]
    blocks: tuple[Block, ...]

    @property
    def crate(self) -> str:
        return self.path.split("::", 1)[0]

    @property
    def name(self) -> str:
        return self.path.rsplit("::", 1)[-1]

    @property
    def module(self) -> str:
        """Path of the enclosing module (the crate name at top level)."""
        parts = self.path.split("::")[:-1]
        if self.owner is not None:
            parts = parts[:-1]
        return "::".join(parts)

    @property
    def ret(self) -> TypeExpr:
        return self.locals[0]

    @property
    def params(self) -> tuple[TypeExpr, ...]:
        return self.locals[1 : self.n_params + 1]

    def statements(self) -> list[Statement]:
        """Flattened statement list; a statement's index here is its location."""
        return [s for b in self.blocks for s in b.stmts]

    def block_starts(self) -> dict[str, int]:
        starts: dict[str, int] = {}
        i = 0
        for b in self.blocks:
            starts[b.label] = i
            i += len(b.stmts)
        return starts


@dataclass
class Program:
    structs: dict[str, AggregateDef] = field(default_factory=dict)
    crates: tuple[str, ...] = ()
    modules: frozenset[str] = frozenset()
    statics: dict[str, TypeExpr] = field(default_factory=dict)
    functions: dict[str, Function] = field(default_factory=dict)
    entry: str = ""
    # wrapper path -> wrapped entry function (only in instrumented programs)
    wrappers: dict[str, str] = field(default_factory=dict)

    def function(self, path: str) -> Function:
        return self.functions[path]

    def target_of(self, callee: str) -> str:
        """Resolve a wrapper path to the function it wraps."""
        return self.wrappers.get(callee, callee)

    def signature(self, callee: str) -> Function:
        return self.functions[self.target_of(callee)]
