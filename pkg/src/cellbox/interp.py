"""Reference interpreter for MiniMIR.

Three ways to run a program:

* plain: everything executes in the root domain (the uninstrumented baseline);
* instrumented: wrapper calls switch domains and transfer data according to
  their copy plans, and every guest access is checked against the access matrix;
* oracle: a plain run with protection switched off that attributes each access
  to the *logical* domain that would be executing, to find which heap objects
  are touched from more than one domain.

Memory layout: bool, i32, references and rawbuf handles take one slot; a vec
handle takes two (data address, length); an aggregate is its fields in order.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Union

from .callgraph import unit_of
from .instrument import AGGREGATE, PASS_SHARED, REFERENT, CopyNode, InstrumentedProgram
from .ir import (
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
    RawBuf,
    RawLoad,
    RawStore,
    Ref,
    Return,
    Syscall,
    TypeExpr,
    Use,
    Vec,
)
from .runtime import (
    MONITOR,
    ROOT,
    ROOT_UNIT,
    DomainError,
    DomainId,
    DomainKind,
    DomainTable,
    SyscallPolicy,
    Trace,
    Violation,
    ViolationError,
    bind_args,
    filter_syscall,
)

log = logging.getLogger(__name__)

DEFAULT_STEP_BUDGET = 10**6
MAX_CALL_DEPTH = 200
MMAP_BASE = 0x4000_0000


class Fault(Exception):
    """Guest-level runtime error that is not a protection violation (a panic)."""


class StepBudgetExceeded(Exception):
    pass


def _wrap32(v: int) -> int:
    return ((v + 2**31) % 2**32) - 2**31


class Layout:
    def __init__(self, p: Program):
        self.p = p
        self._fields: dict[str, dict[str, tuple[int, TypeExpr]]] = {}
        self.size = lru_cache(maxsize=None)(self._size)

    def _size(self, ty: TypeExpr) -> int:
        if isinstance(ty, Vec):
            return 2
        if isinstance(ty, Agg):
            return sum(self.size(t) for _, t in self.p.structs[ty.name].fields)
        return 1

    def field(self, agg: str, name: str) -> tuple[int, TypeExpr]:
        table = self._fields.get(agg)
        if table is None:
            table, off = {}, 0
            for fname, ftype in self.p.structs[agg].fields:
                table[fname] = (off, ftype)
                off += self.size(ftype)
            self._fields[agg] = table
        return table[name]

    def offsets(self, types) -> list[int]:
        out, off = [], 0
        for t in types:
            out.append(off)
            off += self.size(t)
        out.append(off)
        return out


@dataclass
class Outcome:
    status: str  # completed | violated | fault | budget-exceeded
    value: Union[int, bool, tuple, None] = None
    violation: Optional[Violation] = None
    fault: Optional[str] = None
    trace: Trace = field(default_factory=Trace)
    stdout: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    decisions: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "completed"

    def observable(self) -> tuple:
        """What equivalence between a plain and an instrumented run compares."""
        return (self.status, self.value, tuple(self.stdout))


class _Transfer:
    """One direction of a boundary data transfer, done with monitor privileges.

    Discovery walks the copy plan from each root, collects every referent that
    must be copied and merges overlapping ranges, so an object reachable
    through several paths (or through a reference into its interior) is copied
    once and aliasing is preserved.
    """

    def __init__(self, it: "Interpreter", dst: DomainId, memo=(), private: Optional[int] = None):
        self.it = it
        self.mem = it.table.mem
        self.dst = dst
        self.memo: list[tuple[int, int, int]] = list(memo)  # (src start, size, dst start)
        self.private = private  # reverse direction: only copy pointers into this domain
        self.roots: list[tuple[int, int, CopyNode, int, int]] = []  # src, dst, node, count, stride
        self.objects: list[tuple[int, CopyNode, int, int]] = []  # src, elem node, count, stride
        self._seen: set = set()
        self.allocated: list[int] = []

    def add_root(self, src: int, dst: int, node: CopyNode, count: int = 1, stride: int | None = None) -> None:
        self.roots.append((src, dst, node, count, stride or self.it.layout.size(node.ty)))

    def lookup(self, ptr: int) -> Optional[int]:
        for s, n, d in self.memo:
            if s <= ptr < s + n:
                return d + (ptr - s)
        return None

    def _discover(self, node: CopyNode, addr: int) -> None:
        if not self.it.needs_walk(node):
            return
        if node.action == AGGREGATE:
            for name, child in node.children:
                off, _ = self.it.layout.field(node.ty.name, name)
                self._discover(child, addr + off)
            return
        if node.action != REFERENT:
            return
        child = node.children[0][1]
        ptr = self.mem.get(addr, 0)
        stride = self.it.layout.size(child.ty)
        count = 1 if isinstance(node.ty, Ref) else self.mem.get(addr + 1, 0)
        if not ptr or count <= 0:
            return
        if self.lookup(ptr) is not None:
            return
        if self.private is not None:
            owner = self.it.table.owner_of(ptr)
            if owner is None or owner.did.id != self.private:
                return
        key = (ptr, count, child)
        if key in self._seen:
            return
        self._seen.add(key)
        self.objects.append((ptr, child, count, stride))
        if self.it.needs_walk(child):
            for i in range(count):
                self._discover(child, ptr + i * stride)

    def _fix(self, node: CopyNode, s: int, d: int) -> None:
        if node.action == AGGREGATE:
            for name, child in node.children:
                if self.it.needs_walk(child):
                    off, _ = self.it.layout.field(node.ty.name, name)
                    self._fix(child, s + off, d + off)
        elif node.action == REFERENT:
            ptr = self.mem.get(s, 0)
            t = self.lookup(ptr) if ptr else None
            self.mem[d] = ptr if t is None else t

    def _fix_block(self, node: CopyNode, s: int, d: int, count: int, stride: int) -> None:
        if self.it.needs_walk(node):
            for i in range(count):
                self._fix(node, s + i * stride, d + i * stride)

    def _check_source(self, start: int, size: int) -> None:
        table = self.it.table
        for a in (start, start + size - 1):
            v = table.check_access(MONITOR, a, False)
            if v is not None:
                raise ViolationError(v)

    def _raw_copy(self, s: int, d: int, n: int) -> None:
        get = self.mem.get
        self.mem.update({d + i: get(s + i, 0) for i in range(n)})

    def run(self, copy_back: bool = False) -> None:
        for src, _dst, node, count, stride in self.roots:
            if self.it.needs_walk(node):
                for i in range(count):
                    self._discover(node, src + i * stride)
        spans = sorted((s, s + c * st) for s, _n, c, st in self.objects)
        merged: list[list[int]] = []
        for s, e in spans:
            if merged and s < merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        it = self.it
        for s, e in merged:
            size = e - s
            self._check_source(s, size)
            d = it.table.domain_alloc(self.dst, size)
            self.allocated.append(d)
            self._raw_copy(s, d, size)
            owner = it.table.owner_of(s)
            heap = owner is not None and owner.heap is not None and s in owner.heap
            self.memo.append((s, size, d))
            it.stats["copies"] += 1
            it.stats["heap_copies"] += int(heap)
            it.stats["slots_copied"] += size
            it.trace.emit("copy", src=s, dst=d, size=size, heap=heap, to=self.dst.id)
        for src, dst, node, count, stride in self.roots:
            n = count * stride
            if copy_back:
                self._check_source(dst, n)
            self._raw_copy(src, dst, n)
            self._fix_block(node, src, dst, count, stride)
        for s, node, count, stride in self.objects:
            self._fix_block(node, s, self.lookup(s), count, stride)

    def reversed_memo(self) -> list[tuple[int, int, int]]:
        return [(d, n, s) for s, n, d in self.memo]


class Interpreter:
    def __init__(
        self,
        program: Union[Program, InstrumentedProgram],
        seed: int = 0,
        step_budget: int = DEFAULT_STEP_BUDGET,
        *,
        oracle_units=None,
        stack_size: int = 4096,
        heap_size: int = 1 << 16,
        shared_heap_size: Optional[int] = None,
    ):
        if isinstance(program, InstrumentedProgram):
            self.ip: Optional[InstrumentedProgram] = program
            self.p = program.program
            units = {u.unit_id: u.transient for u in program.units}
            shared = program.shared
            self.policy = SyscallPolicy({u.unit_id: u.syscalls for u in program.units})
        else:
            self.ip = None
            self.p = program
            units, shared = {}, {}
            self.policy = SyscallPolicy()
        self.oracle = oracle_units is not None
        self.owner_unit = unit_of(oracle_units) if self.oracle else {}
        self.seed = seed
        self.budget = step_budget
        self.trace = Trace()
        self.table = DomainTable(
            units, shared, stack_size=stack_size, heap_size=heap_size,
            shared_heap_size=shared_heap_size, trace=self.trace,
        )
        self.layout = Layout(self.p)
        self.stdout: list[str] = []
        self.decisions: list[int] = []
        self.steps = 0
        self.depth = 0
        self.stats = {"copies": 0, "heap_copies": 0, "slots_copied": 0, "copybacks": 0, "syscalls": 0}
        self._statics: dict[tuple[int, str], int] = {}
        self._fd = 3
        self._mmaps = 0
        self._walk: dict[CopyNode, bool] = {}
        self._frames: dict[str, tuple[list, dict, list[int]]] = {}
        # oracle bookkeeping
        self.logical: list[int] = [ROOT_UNIT]
        self._obj_starts: list[int] = []
        self._obj_info: list[tuple[int, int, tuple[str, int]]] = []  # start, end, site
        self.touches: dict[int, set[int]] = {}

    # -- helpers -------------------------------------------------------------

    def needs_walk(self, node: CopyNode) -> bool:
        r = self._walk.get(node)
        if r is None:
            if node.action == REFERENT:
                r = True
            elif node.action == AGGREGATE:
                r = any(self.needs_walk(c) for _, c in node.children)
            else:
                r = False
            self._walk[node] = r
        return r

    def _frame_info(self, f: Function):
        info = self._frames.get(f.path)
        if info is None:
            info = (f.statements(), f.block_starts(), self.layout.offsets(f.locals))
            self._frames[f.path] = info
        return info

    @property
    def executing(self) -> DomainId:
        return self.table.current

    def _tick(self) -> None:
        self.steps += 1
        if self.steps > self.budget:
            raise StepBudgetExceeded(f"step budget of {self.budget} exceeded")

    def load(self, addr: int):
        if not self.oracle:
            v = self.table.check_access(self.table.current, addr, False)
            if v is not None:
                raise ViolationError(v)
        else:
            self._observe(addr)
        return self.table.mem.get(addr, 0)

    def store(self, addr: int, value) -> None:
        if not self.oracle:
            v = self.table.check_access(self.table.current, addr, True)
            if v is not None:
                raise ViolationError(v)
        else:
            self._observe(addr)
        self.table.mem[addr] = value

    def _observe(self, addr: int) -> None:
        i = bisect.bisect_right(self._obj_starts, addr) - 1
        if i >= 0:
            start, end, _ = self._obj_info[i]
            if addr < end:
                self.touches.setdefault(start, set()).add(self.logical[-1])

    def _static_addr(self, path: str) -> int:
        did = self.table.current
        key = (did.id, path)
        addr = self._statics.get(key)
        if addr is None:
            addr = self.table.domain_alloc(did, self.layout.size(self.p.statics[path]))
            self._statics[key] = addr
        return addr

    def place_addr(self, f: Function, base: int, place: Place) -> tuple[int, TypeExpr]:
        if place.is_static:
            addr, ty = self._static_addr(place.base), self.p.statics[place.base]
        else:
            addr = base + self._frame_info(f)[2][place.base]
            ty = f.locals[place.base]
        for proj in place.proj:
            if isinstance(proj, Deref):
                addr = self.load(addr)
                ty = ty.target if isinstance(ty, Ref) else I32()
            elif isinstance(proj, Field):
                off, ty = self.layout.field(ty.name, proj.name)
                addr += off
            else:
                data, n = self.load(addr), self.load(addr + 1)
                if not 0 <= proj.index < n:
                    raise Fault(f"index {proj.index} out of bounds for length {n}")
                ty = ty.elem
                addr = data + proj.index * self.layout.size(ty)
        return addr, ty

    def _value(self, f, base, op) -> int:
        if isinstance(op, int):
            return op
        addr, _ = self.place_addr(f, base, op)
        return self.load(addr)

    # -- execution -----------------------------------------------------------

    def run(self) -> Outcome:
        entry = self.p.functions[self.p.entry]
        status, violation, fault, value = "completed", None, None, None
        try:
            ret = self.invoke(entry, [])
            value = ret[0] if len(ret) == 1 else tuple(ret)
        except ViolationError as e:
            status, violation = "violated", e.violation
            self.trace.emit(
                "violation", type=violation.kind.value, domain=violation.domain.id,
                target=violation.target, at=violation.location,
            )
        except Fault as e:
            status, fault = "fault", str(e)
            self.trace.emit("fault", detail=fault)
        except DomainError as e:
            status, fault = "fault", f"resource: {e}"
            self.trace.emit("fault", detail=fault)
        except StepBudgetExceeded as e:
            status, fault = "budget-exceeded", str(e)
        stats = dict(self.stats)
        stats["steps"] = self.steps
        stats["switches"] = self.table.switches
        stats["allocs"] = dict(sorted(self.table.stats_allocs.items()))
        return Outcome(status, value, violation, fault, self.trace, self.stdout, stats, self.decisions)

    def invoke(self, g: Function, args: list[list]) -> list:
        """Call ``g`` in the current domain with already-evaluated argument slots."""
        self.depth += 1
        if self.depth > MAX_CALL_DEPTH:
            raise Fault("call depth exceeded")
        _, _, offsets = self._frame_info(g)
        did = self.table.current
        fb = self.table.push_frame(offsets[-1], did)
        for i, vals in enumerate(args, 1):
            for k, v in enumerate(vals):
                self.store(fb + offsets[i] + k, v)
        self.execute(g, fb)
        ret = [self.load(fb + k) for k in range(offsets[1])]
        self.table.pop_frame(fb, did)
        self.depth -= 1
        return ret

    def execute(self, f: Function, base: int) -> None:
        stmts, starts, _ = self._frame_info(f)
        pc, n = 0, len(stmts)
        while pc < n:
            self._tick()
            s = stmts[pc]
            try:
                t = type(s)
                if t is Assign:
                    self._assign(f, base, s)
                elif t is Branch:
                    i = len(self.decisions)
                    bit = (self.seed >> i) & 1
                    self.decisions.append(bit)
                    pc = starts[s.targets[bit]]
                    continue
                elif t is Goto:
                    pc = starts[s.target]
                    continue
                elif t is Return:
                    return
                elif t is Call:
                    self._call(f, base, s)
                elif t is Alloc:
                    self._alloc(f, base, s, pc)
                elif t is Syscall:
                    self._syscall(f, base, s)
                elif t is RawLoad:
                    addr, _ = self.place_addr(f, base, s.addr.place)
                    val = self.load(addr + s.addr.offset)
                    dst, _ = self.place_addr(f, base, s.dst)
                    self.store(dst, val)
                elif t is RawStore:
                    src, _ = self.place_addr(f, base, s.src)
                    val = self.load(src)
                    addr, _ = self.place_addr(f, base, s.addr.place)
                    self.store(addr + s.addr.offset, val)
            except ViolationError as e:
                if e.violation.location is None:
                    raise ViolationError(e.violation.at(f"{f.path}#{pc}")) from None
                raise
            except Fault as e:
                if " at " not in str(e):
                    raise Fault(f"{e} at {f.path}#{pc}") from None
                raise
            pc += 1

    def _assign(self, f, base, s: Assign) -> None:
        src = s.src
        if isinstance(src, Use):
            addr, ty = self.place_addr(f, base, src.place)
            vals = [self.load(addr + k) for k in range(self.layout.size(ty))]
        elif isinstance(src, (AddrOf, Addr)):
            vals = [self.place_addr(f, base, src.place)[0]]
        elif isinstance(src, Const):
            vals = [src.value]
        else:
            vals = [_wrap32(int(self._value(f, base, src.lhs)) + int(self._value(f, base, src.rhs)))]
        dst, _ = self.place_addr(f, base, s.dst)
        for k, v in enumerate(vals):
            self.store(dst + k, v)

    def _alloc(self, f, base, s: Alloc, pc: int) -> None:
        size = s.length * self.layout.size(s.elem)
        if s.shared is not None and self.ip is not None:
            did = self.table.domain(s.shared).did
        else:
            did = self.table.current
        data = self.table.domain_alloc(did, size) if size > 0 else 0
        if self.oracle and size > 0:
            self._obj_starts.append(data)
            self._obj_info.append((data, data + size, (f.path, pc)))
            self.touches[data] = {self.logical[-1]}  # the allocating domain owns the object
        dst, _ = self.place_addr(f, base, s.dst)
        self.store(dst, data)
        self.store(dst + 1, s.length)

    def _syscall(self, f, base, s: Syscall) -> None:
        args = [a if isinstance(a, (int, str)) else self._value(f, base, a) for a in s.args]
        ctx = self.table.current
        self.stats["syscalls"] += 1
        if not self.oracle:
            v = filter_syscall(self.policy, ctx, s.name, args)
            if v is not None:
                self.trace.emit("syscall", name=s.name, domain=ctx.id, verdict="deny")
                raise ViolationError(v)
        self.trace.emit("syscall", name=s.name, domain=ctx.id, verdict="allow")
        bound = bind_args(s.name, args)
        if s.name == "write":
            self.stdout.append(str(bound.get("value", "")))
            result = 1
        elif s.name == "getpid":
            result = 4242
        elif s.name in ("open", "openat"):
            result, self._fd = self._fd, self._fd + 1
        elif s.name == "mmap":
            result = MMAP_BASE + self._mmaps * 0x1000
            self._mmaps += 1
        else:
            result = 0
        dst, _ = self.place_addr(f, base, s.dst)
        self.store(dst, result)

    def _call(self, f, base, s: Call) -> None:
        g = self.p.signature(s.callee)
        args = []
        for a, ty in zip(s.args, g.params):
            addr, _ = self.place_addr(f, base, a)
            args.append([self.load(addr + k) for k in range(self.layout.size(ty))])
        wrapper = self.ip.wrappers.get(s.callee) if self.ip is not None else None
        cur = self.table.current
        cur_unit = ROOT_UNIT if cur.kind is DomainKind.ROOT else cur.unit
        if wrapper is not None and wrapper.unit != cur_unit:
            ret = self._transition(wrapper, g, args)
        elif self.oracle and self.owner_unit.get(g.path, self.logical[-1]) != self.logical[-1]:
            self.logical.append(self.owner_unit[g.path])
            ret = self.invoke(g, args)
            self.logical.pop()
        else:
            ret = self.invoke(g, args)
        dst, _ = self.place_addr(f, base, s.dst)
        for k, v in enumerate(ret):
            self.store(dst + k, v)

    def _transition(self, w, g: Function, args: list[list]) -> list:
        table = self.table
        caller = table.current
        did = table.create_sandbox_domain(w.unit, w.transient if w.transient else None, requester=MONITOR)
        self.trace.emit("transition", wrapper=w.path, src=caller.id, dst=did.id)
        _, _, offsets = self._frame_info(g)
        ret_size = offsets[1]
        # caller-side scratch area: argument slots then the return slot
        arg_sizes = [len(a) for a in args]
        scratch = table.push_frame(sum(arg_sizes) + ret_size, caller)
        pos, arg_addrs = scratch, []
        for vals in args:
            arg_addrs.append(pos)
            for k, v in enumerate(vals):
                self.store(pos + k, v)
            pos += len(vals)
        ret_addr = pos

        table.enter_domain(did)
        self.depth += 1
        if self.depth > MAX_CALL_DEPTH:
            raise Fault("call depth exceeded")
        fb = table.push_frame(offsets[-1], did)
        fwd = _Transfer(self, did)
        for i, node in enumerate(w.params):
            fwd.add_root(arg_addrs[i], fb + offsets[i + 1], node)
        fwd.run()
        self.execute(g, fb)
        back = _Transfer(self, caller, memo=fwd.reversed_memo(), private=did.id)
        for s, node, count, stride in fwd.objects:
            back.add_root(fwd.lookup(s), s, node, count, stride)
        self.stats["copybacks"] += len(back.roots)
        back.add_root(fb, ret_addr, w.ret)
        back.run(copy_back=True)
        table.pop_frame(fb, did)
        self.depth -= 1
        table.exit_domain()
        if w.transient:
            table.destroy_transient(did)
        else:
            for addr in fwd.allocated:
                table.domain_free(addr)
        ret = [self.load(ret_addr + k) for k in range(ret_size)]
        table.pop_frame(scratch, caller)
        return ret


def run(
    program: Union[Program, InstrumentedProgram],
    seed: int = 0,
    step_budget: int = DEFAULT_STEP_BUDGET,
    **kwargs,
) -> Outcome:
    return Interpreter(program, seed, step_budget, **kwargs).run()


@dataclass
class OracleReport:
    # alloc site -> every set of logical domains observed touching one of its objects
    crossing: dict[tuple[str, int], set[frozenset[int]]] = field(default_factory=dict)
    outcomes: list[Outcome] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    # seed -> crossing sites observed in that run
    by_seed: dict[int, set[tuple[str, int]]] = field(default_factory=dict)

    @property
    def sites(self) -> set[tuple[str, int]]:
        return set(self.crossing)

    def participants(self, site: tuple[str, int]) -> frozenset[int]:
        return frozenset().union(*self.crossing.get(site, ()))

    def decisions(self, seed: int) -> list[int]:
        return self.outcomes[self.seeds.index(seed)].decisions

    def to_json(self) -> dict:
        return {
            "crossing": [
                {"site": f"{f}#{i}", "domains": sorted(sorted(d) for d in doms)}
                for (f, i), doms in sorted(self.crossing.items())
            ],
            "runs": [
                {
                    "seed": s,
                    "status": o.status,
                    "decisions": o.decisions,
                    "crossing": sorted(f"{f}#{i}" for f, i in self.by_seed[s]),
                }
                for s, o in zip(self.seeds, self.outcomes)
            ],
        }


def run_oracle(p: Program, units, seeds, step_budget: int = DEFAULT_STEP_BUDGET, **kwargs) -> OracleReport:
    """Run ``p`` uninstrumented for each seed and record cross-domain object use.

    Accesses are attributed to the domain that would execute them after
    instrumentation; data movement by the transition layer itself is not a
    guest access and is not recorded.
    """
    report = OracleReport()
    for seed in seeds:
        it = Interpreter(p, seed, step_budget, oracle_units=list(units), **kwargs)
        report.seeds.append(seed)
        report.outcomes.append(it.run())
        sites = {start: site for start, _, site in it._obj_info}
        seen = report.by_seed.setdefault(seed, set())
        for start, doms in it.touches.items():
            if len(doms) > 1:
                report.crossing.setdefault(sites[start], set()).add(frozenset(doms))
                seen.add(sites[start])
    return report


def explore_paths(p: Program, step_budget: int = DEFAULT_STEP_BUDGET, max_paths: int = 4096) -> tuple[list[int], bool]:
    """One seed per distinct sequence of branch decisions, by depth-first search.

    Decision ``i`` of a run is bit ``i`` of its seed. A run whose seed has no
    bits set at or beyond position ``fixed`` takes the ``0`` arm of every
    later branch, so flipping each of those decisions in turn (and fixing the
    prefix) visits every path exactly once. Returns the sorted seeds and
    whether the enumeration finished within ``max_paths``.
    """
    seeds: list[int] = []
    stack = [(0, 0)]
    while stack and len(seeds) < max_paths:
        seed, fixed = stack.pop()
        decisions = Interpreter(p, seed, step_budget).run().decisions
        seeds.append(seed)
        stack.extend((seed | 1 << i, i + 1) for i in range(fixed, len(decisions)))
    return sorted(seeds), not stack


def explore_seeds(p: Program, step_budget: int = DEFAULT_STEP_BUDGET, max_paths: int = 4096) -> list[int]:
    seeds, complete = explore_paths(p, step_budget, max_paths)
    if not complete:
        log.warning("path enumeration stopped after %d paths", max_paths)
    return seeds
