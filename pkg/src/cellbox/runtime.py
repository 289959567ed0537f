"""Simulated in-process isolation substrate.

Memory is a flat integer address space split into disjoint per-domain
regions. Every guest load and store goes through :meth:`DomainTable.check_access`;
protection is a software model of per-domain protection keys.

Addresses are slot-granular: one address holds one scalar (bool, i32,
reference, raw handle).
"""

from __future__ import annotations

import bisect
import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

ROOT_ID = 0
MONITOR_ID = 1
# participant marker for the root domain inside shared-domain participant sets
ROOT_UNIT = -1
SHARED_BASE = 1_000_000

# [0, RESERVED_LOW) models the interposer's NOP-sled page; never mapped to a domain
RESERVED_LOW = 0x200
ADDRESS_BASE = 0x1000
MONITOR_REGION = 0x100

PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4


class DomainKind(enum.Enum):
    ROOT = "root"
    MONITOR = "monitor"
    SANDBOX = "sandbox"
    SHARED = "shared"


@dataclass(frozen=True)
class DomainId:
    id: int
    kind: DomainKind
    unit: Optional[int] = None
    instance: Optional[int] = None
    participants: frozenset[int] = frozenset()

    def __str__(self) -> str:
        if self.kind is DomainKind.SANDBOX:
            return f"sandbox({self.unit}.{self.instance})#{self.id}"
        if self.kind is DomainKind.SHARED:
            return f"shared({','.join(map(str, sorted(self.participants)))})#{self.id}"
        return self.kind.value


ROOT = DomainId(ROOT_ID, DomainKind.ROOT)
MONITOR = DomainId(MONITOR_ID, DomainKind.MONITOR)


class ViolationKind(enum.Enum):
    MEMORY_ACCESS = "memory-access"
    SYSCALL_DENIED = "syscall-denied"
    STALE_DOMAIN = "stale-domain"
    VISIBILITY = "visibility"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    domain: DomainId
    target: Union[int, str, None]
    location: Optional[str] = None
    detail: str = ""

    def at(self, location: str) -> "Violation":
        return Violation(self.kind, self.domain, self.target, location, self.detail)

    def __str__(self) -> str:
        target = hex(self.target) if isinstance(self.target, int) else self.target
        text = f"{self.kind.value} in {self.domain} target={target}"
        if self.location:
            text += f" at {self.location}"
        if self.detail:
            text += f" ({self.detail})"
        return text


class ViolationError(Exception):
    """Raised to unwind a run when an action is forbidden."""

    def __init__(self, violation: Violation):
        self.violation = violation
        super().__init__(str(violation))


class DomainError(Exception):
    """Misuse of the domain API (not a guest-visible violation)."""


class Trace:
    """Ordered event log; one line per event, fields in call order."""

    def __init__(self) -> None:
        self.lines: list[str] = []

    def emit(self, kind: str, **fields) -> None:
        parts = [kind] + [f"{k}={_fmt(v)}" for k, v in fields.items()]
        self.lines.append(" ".join(parts))

    def text(self) -> str:
        return "".join(f"{i} {line}\n" for i, line in enumerate(self.lines))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, str) and (" " in v or not v):
        return repr(v)
    return str(v)


@dataclass
class Region:
    start: int
    size: int
    owner: int  # numeric domain id

    @property
    def end(self) -> int:
        return self.start + self.size

    def __contains__(self, addr: int) -> bool:
        return self.start <= addr < self.end


@dataclass
class Domain:
    did: DomainId
    transient: bool = False
    stack: Optional[Region] = None
    heap: Optional[Region] = None
    active: bool = True
    sp: int = 0  # next free stack slot
    heap_top: int = 0  # bump pointer
    free_blocks: list[tuple[int, int]] = field(default_factory=list)


class DomainTable:
    """Live domains, their regions, the access matrix and the allocator.

    Allocator bookkeeping (``blocks``, free lists, bump pointers) is plain
    Python state owned by this object, i.e. the monitor: no guest store can
    reach it.
    """

    def __init__(
        self,
        units: dict[int, bool] | None = None,
        shared: dict[int, Iterable[int]] | None = None,
        stack_size: int = 4096,
        heap_size: int = 1 << 16,
        shared_heap_size: int | None = None,
        trace: Trace | None = None,
    ):
        self.units = dict(units or {})  # unit id -> transient
        self.stack_size = stack_size
        self.heap_size = heap_size
        self.shared_heap_size = shared_heap_size or heap_size
        self.trace = trace if trace is not None else Trace()
        self.mem: dict[int, Union[int, bool]] = {}
        self.domains: dict[int, Domain] = {}
        self.regions: list[Region] = []
        self._region_starts: list[int] = []
        self._next_addr = ADDRESS_BASE
        self._next_id = 2
        self.instances: dict[int, int] = {}  # unit -> last instance number
        self.persistent: dict[int, DomainId] = {}
        self.blocks: dict[int, tuple[int, int]] = {}  # addr -> (domain id, size)
        self.context: list[DomainId] = [ROOT]
        self.stats_allocs: dict[int, int] = {}
        self.switches = 0

        root = Domain(ROOT)
        root.stack = self._map(self.stack_size, ROOT_ID)
        root.heap = self._map(self.heap_size, ROOT_ID)
        self._init_pointers(root)
        self.domains[ROOT_ID] = root
        monitor = Domain(MONITOR)
        monitor.heap = self._map(MONITOR_REGION, MONITOR_ID)
        self._init_pointers(monitor)
        self.domains[MONITOR_ID] = monitor
        for sid, parts in sorted((shared or {}).items()):
            did = DomainId(sid, DomainKind.SHARED, participants=frozenset(parts))
            dom = Domain(did)
            dom.heap = self._map(self.shared_heap_size, sid)
            self._init_pointers(dom)
            self.domains[sid] = dom

    # -- address space -----------------------------------------------------

    def _map(self, size: int, owner: int) -> Region:
        region = Region(self._next_addr, size, owner)
        self._next_addr += size  # ranges are never reused
        self.regions.append(region)
        self._region_starts.append(region.start)
        return region

    @staticmethod
    def _init_pointers(dom: Domain) -> None:
        if dom.stack is not None:
            dom.sp = dom.stack.start
        if dom.heap is not None:
            dom.heap_top = dom.heap.start

    @property
    def address_space_end(self) -> int:
        return self._next_addr

    def owner_of(self, addr: int) -> Optional[Domain]:
        i = bisect.bisect_right(self._region_starts, addr) - 1
        if i < 0 or addr not in self.regions[i]:
            return None
        return self.domains[self.regions[i].owner]

    def domain(self, did: Union[DomainId, int]) -> Domain:
        key = did.id if isinstance(did, DomainId) else did
        if key not in self.domains:
            raise DomainError(f"unknown domain {did}")
        return self.domains[key]

    @property
    def current(self) -> DomainId:
        return self.context[-1]

    # -- access matrix -----------------------------------------------------

    @staticmethod
    def may_access(context: DomainId, owner: DomainId) -> bool:
        if context.kind is DomainKind.MONITOR:
            return True
        if owner.kind is DomainKind.MONITOR:
            return False
        if context.kind is DomainKind.ROOT:
            return True
        if context.kind is DomainKind.SANDBOX:
            if owner.id == context.id:
                return True
            return owner.kind is DomainKind.SHARED and context.unit in owner.participants
        return False

    def check_access(self, context: DomainId, addr: int, is_write: bool) -> Optional[Violation]:
        """None if allowed, else the Violation describing why not."""
        owner = self.owner_of(addr)
        if owner is None:
            return Violation(ViolationKind.MEMORY_ACCESS, context, addr, detail="unmapped address")
        if not owner.active:
            return Violation(ViolationKind.STALE_DOMAIN, context, addr, detail=f"owner {owner.did} destroyed")
        if not self.may_access(context, owner.did):
            op = "write" if is_write else "read"
            return Violation(ViolationKind.MEMORY_ACCESS, context, addr, detail=f"{op} of {owner.did} memory")
        return None

    def load(self, addr: int, context: DomainId | None = None):
        ctx = context or self.current
        v = self.check_access(ctx, addr, False)
        if v is not None:
            raise ViolationError(v)
        return self.mem.get(addr, 0)

    def store(self, addr: int, value, context: DomainId | None = None) -> None:
        ctx = context or self.current
        v = self.check_access(ctx, addr, True)
        if v is not None:
            raise ViolationError(v)
        self.mem[addr] = value

    # -- lifecycle ---------------------------------------------------------

    def create_sandbox_domain(
        self, unit: int, transient: bool | None = None, requester: DomainId | None = None
    ) -> DomainId:
        req = requester or self.current
        if req.kind not in (DomainKind.ROOT, DomainKind.MONITOR):
            raise ViolationError(
                Violation(ViolationKind.VISIBILITY, req, f"create unit {unit}", detail="only root may create sandboxes")
            )
        if unit not in self.units:
            raise DomainError(f"unit {unit} was never declared")
        if transient is None:
            transient = self.units[unit]
        if not transient and unit in self.persistent:
            return self.persistent[unit]
        instance = self.instances.get(unit, 0) + 1
        self.instances[unit] = instance
        did = DomainId(self._next_id, DomainKind.SANDBOX, unit=unit, instance=instance)
        self._next_id += 1
        if self._next_id >= SHARED_BASE:
            raise DomainError("sandbox id space exhausted")
        dom = Domain(did, transient=transient)
        dom.stack = self._map(self.stack_size, did.id)
        dom.heap = self._map(self.heap_size, did.id)
        self._init_pointers(dom)
        self.domains[did.id] = dom
        if not transient:
            self.persistent[unit] = did
        self.trace.emit("create", domain=did.id, unit=unit, instance=instance, transient=transient)
        return did

    def enter_domain(self, did: DomainId) -> None:
        dom = self.domain(did)
        if not dom.active:
            raise ViolationError(
                Violation(ViolationKind.STALE_DOMAIN, self.current, did.id, detail="enter of destroyed domain")
            )
        if did.kind is not DomainKind.SANDBOX and did.kind is not DomainKind.ROOT:
            raise DomainError(f"cannot execute in {did}")
        self.trace.emit("enter", src=self.current.id, dst=did.id)
        self.context.append(did)
        self.switches += 1

    def exit_domain(self) -> DomainId:
        if len(self.context) <= 1:
            raise DomainError("exit with empty context stack")
        did = self.context.pop()
        self.trace.emit("exit", src=did.id, dst=self.current.id)
        self.switches += 1
        return did

    def destroy_transient(self, did: DomainId) -> None:
        dom = self.domain(did)
        if did.kind is not DomainKind.SANDBOX or not dom.transient:
            raise DomainError(f"{did} is not a transient sandbox instance")
        if any(c.id == did.id for c in self.context):
            raise DomainError(f"{did} is still entered")
        if not dom.active:
            raise DomainError(f"{did} already destroyed")
        dom.active = False
        for addr in [a for a, (owner, _) in self.blocks.items() if owner == did.id]:
            del self.blocks[addr]
        self.trace.emit("destroy", domain=did.id)

    # -- stack frames ------------------------------------------------------

    def push_frame(self, size: int, did: DomainId | None = None) -> int:
        dom = self.domain(did or self.current)
        if dom.stack is None:
            raise DomainError(f"{dom.did} has no stack")
        base = dom.sp
        if base + size > dom.stack.end:
            raise DomainError(f"stack overflow in {dom.did}")
        dom.sp += size
        for a in range(base, base + size):
            self.mem.pop(a, None)
        return base

    def pop_frame(self, base: int, did: DomainId | None = None) -> None:
        dom = self.domain(did or self.current)
        dom.sp = base

    # -- heap --------------------------------------------------------------

    def domain_alloc(self, did: DomainId, size: int) -> int:
        if size <= 0:
            raise DomainError("allocation size must be positive")
        dom = self.domain(did)
        if not dom.active:
            raise DomainError(f"alloc on destroyed domain {did}")
        if dom.heap is None:
            raise DomainError(f"{did} has no heap")
        addr = None
        for i, (start, bsize) in enumerate(dom.free_blocks):
            if bsize >= size:
                addr = start
                if bsize == size:
                    dom.free_blocks.pop(i)
                else:
                    dom.free_blocks[i] = (start + size, bsize - size)
                break
        if addr is None:
            if dom.heap_top + size > dom.heap.end:
                raise DomainError(f"heap of {did} exhausted")
            addr = dom.heap_top
            dom.heap_top += size
        for a in range(addr, addr + size):
            self.mem.pop(a, None)
        self.blocks[addr] = (did.id, size)
        self.stats_allocs[did.id] = self.stats_allocs.get(did.id, 0) + 1
        self.trace.emit("alloc", domain=did.id, addr=addr, size=size)
        return addr

    def domain_free(self, addr: int) -> None:
        if addr not in self.blocks:
            raise DomainError(f"free of unknown address {addr:#x}")
        owner, size = self.blocks.pop(addr)
        self.domains[owner].free_blocks.append((addr, size))
        self.trace.emit("free", domain=owner, addr=addr)


# ---------------------------------------------------------------------------
# System call filtering
# ---------------------------------------------------------------------------

# name -> parameter names. Effects are simulated by the interpreter.
SYSCALLS: dict[str, tuple[str, ...]] = {
    "write": ("value",),
    "getpid": (),
    "open": ("path",),
    "openat": ("dirfd", "path"),
    "close": ("fd",),
    "pkey_alloc": (),
    "pkey_free": ("key",),
    "pkey_mprotect": ("addr", "len", "prot", "key"),
    "mmap": ("addr", "len", "prot"),
    "mprotect": ("addr", "len", "prot"),
    "munmap": ("addr", "len"),
}

PKEY_CALLS = frozenset({"pkey_alloc", "pkey_free", "pkey_mprotect"})
OPEN_CALLS = frozenset({"open", "openat"})
MAP_CALLS = frozenset({"mmap", "mprotect", "munmap"})
_SELF_MEM = re.compile(r"^/proc/(self|\d+)/mem$")


def deny_reason(name: str, args: dict) -> Optional[str]:
    """Built-in deny rules; these hold for every non-monitor context."""
    if name in PKEY_CALLS:
        return "protection-key manipulation"
    if name in OPEN_CALLS and _SELF_MEM.match(str(args.get("path", ""))):
        return "open of process memory"
    if name in MAP_CALLS:
        addr, length = int(args.get("addr", 0)), int(args.get("len", 0))
        chosen_by_kernel = name == "mmap" and addr == 0
        if not chosen_by_kernel and addr < RESERVED_LOW and addr + max(length, 1) > 0:
            return "modification of interposer region"
        prot = int(args.get("prot", 0))
        if prot & PROT_WRITE and prot & PROT_EXEC:
            return "writable and executable mapping"
    return None


@dataclass(frozen=True)
class SyscallPolicy:
    allow: dict[int, frozenset[str]] = field(default_factory=dict)
    monitor_exempt: bool = True


def bind_args(name: str, args: Iterable) -> dict:
    return dict(zip(SYSCALLS.get(name, ()), args))


def filter_syscall(policy: SyscallPolicy, context: DomainId, name: str, args) -> Optional[Violation]:
    """None if the call may proceed, else a syscall-denied Violation."""
    if context.kind is DomainKind.MONITOR and policy.monitor_exempt:
        return None
    bound = args if isinstance(args, dict) else bind_args(name, args)
    reason = deny_reason(name, bound)
    if reason is not None:
        return Violation(ViolationKind.SYSCALL_DENIED, context, name, detail=reason)
    if context.kind is DomainKind.SANDBOX and name not in policy.allow.get(context.unit, frozenset()):
        return Violation(ViolationKind.SYSCALL_DENIED, context, name, detail="not in allow-list")
    return None
