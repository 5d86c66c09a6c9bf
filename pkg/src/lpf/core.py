"""Contexts, memory slots and the one-sided primitives.

A :class:`Context` is the per-process handle an SPMD function receives. put
and get only append to the context's queue; all data moves inside
:meth:`Context.sync`, which hands the queue to the sync engine.
"""

from __future__ import annotations

import enum
import hashlib
import os
import random
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable

from lpf import machine
from lpf.errors import FatalError, OutOfCapacity, OutOfMemory
from lpf.sync.wire import GET, LOCAL_BIT, PUT

MAX_P = None
ROOT_PID = 0


class Scope(enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"


class MsgAttr(enum.Enum):
    DEFAULT = 0


class SyncAttr(enum.Enum):
    DEFAULT = 0


MSG_DEFAULT = MsgAttr.DEFAULT
SYNC_DEFAULT = SyncAttr.DEFAULT


@dataclass(frozen=True)
class MemSlot:
    id: int
    scope: Scope

    @property
    def wire(self) -> int:
        return self.id | LOCAL_BIT if self.scope is Scope.LOCAL else self.id


@dataclass(frozen=True, slots=True)
class Request:
    kind: int
    remote: int
    local_slot: int
    local_offset: int
    remote_slot: int
    remote_offset: int
    size: int
    attr: int = 0


_symbols: dict[str, Callable] = {}


def symbol(fn=None, *, name: str | None = None):
    """Register ``fn`` so it can be passed by name through :class:`Args`."""
    def register(f):
        _symbols[name or f"{f.__module__}.{f.__qualname__}"] = f
        return f
    return register(fn) if fn is not None else register


def resolve_symbol(name: str) -> Callable:
    try:
        return _symbols[name]
    except KeyError:
        raise FatalError(f"unknown symbol {name!r}") from None


@dataclass
class Args:
    input: bytes = b""
    output: bytearray | memoryview | None = None
    symbols: tuple[str, ...] = ()

    @property
    def input_size(self) -> int:
        return len(self.input)

    @property
    def output_size(self) -> int:
        return 0 if self.output is None else memoryview(self.output).nbytes

    def resolve(self, name: str) -> Callable:
        if name not in self.symbols:
            raise FatalError(f"symbol {name!r} was not passed in args")
        return resolve_symbol(name)


NO_ARGS = Args()


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").lower() in ("1", "true", "yes", "on")


@dataclass(frozen=True)
class Config:
    debug: bool = False
    meta_exchange: str = "direct"   # or "bruck"
    seed: int | None = None
    small_limit: int = 4096
    barrier_fanin: int | None = None
    max_entries: int = 1 << 24      # slots/messages one context may reserve

    @classmethod
    def from_env(cls) -> Config:
        seed = os.environ.get("LPF_SEED")
        fanin = os.environ.get("LPF_BARRIER_FANIN")
        return cls(
            debug=_env_flag("LPF_DEBUG"),
            meta_exchange=os.environ.get("LPF_META_EXCHANGE", "direct"),
            seed=int(seed) if seed else None,
            small_limit=int(os.environ.get("LPF_SMALL_LIMIT", 4096)),
            barrier_fanin=int(fanin) if fanin else None,
        )

    def with_(self, **changes) -> Config:
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def _as_bytes_view(buf, size: int | None) -> memoryview:
    view = memoryview(buf)
    if not view.c_contiguous:
        raise ValueError("registered memory must be contiguous")
    view = view.cast("B") if view.format != "B" or view.ndim != 1 else view
    if size is None:
        return view
    if size < 0 or size > view.nbytes:
        raise ValueError(f"size {size} outside buffer of {view.nbytes} bytes")
    return view[:size]


@dataclass
class _Capacity:
    slots: int = 0
    msgs: int = 0


class Context:
    def __init__(self, pid: int, nprocs: int, channel, config: Config | None = None):
        self.pid = pid
        self.nprocs = nprocs
        self.config = config or Config.from_env()
        self._channel = channel
        self._slots: dict[int, memoryview] = {}
        self._n_local = 0
        self._n_global = 0
        self._queue: list[Request] = []
        self._active = _Capacity()
        self._pending: _Capacity | None = None
        self._reserved: tuple[list, list] = ([], [])
        self._pending_reserved: tuple[list | None, list | None] = (None, None)
        self._guards: list[tuple[int, int, int, int]] = []
        self._state = "active"
        seed = self.config.seed if self.config.seed is not None else random.randrange(1 << 62)
        self.rng = random.Random(hash((seed, pid)))
        self.last_stats = None
        self.trace: list | None = None
        self.exchange_stats = None
        self.local_error = None

    # -- bookkeeping -----------------------------------------------------

    @property
    def capacity_slots(self) -> int:
        return self._active.slots

    @property
    def capacity_msgs(self) -> int:
        return self._active.msgs

    @property
    def pending_capacity(self) -> tuple[int, int] | None:
        return None if self._pending is None else (self._pending.slots, self._pending.msgs)

    @property
    def n_slots(self) -> int:
        return len(self._slots)

    @property
    def queue_length(self) -> int:
        return len(self._queue)

    @property
    def channel(self):
        return self._channel

    def state_digest(self) -> str:
        """Digest of everything a primitive may observably change."""
        h = hashlib.sha256()
        for key in sorted(self._slots):
            view = self._slots[key]
            h.update(repr((key, view.nbytes, view.readonly, id(view.obj))).encode())
        h.update(repr(self._queue).encode())
        h.update(repr((self._active, self._pending, self._n_local, self._n_global,
                       len(self._reserved[0]), len(self._reserved[1]),
                       self._state)).encode())
        return h.hexdigest()

    def _require_active(self) -> None:
        if self._state != "active":
            raise FatalError(f"context is {self._state}")

    def _view(self, wire_slot: int) -> memoryview:
        return self._slots[wire_slot]

    def _slot_limit(self) -> int:
        if self._pending is not None:
            return min(self._active.slots, self._pending.slots)
        return self._active.slots

    # -- registration ----------------------------------------------------

    def register_local(self, buf, size: int | None = None) -> MemSlot:
        return self._register(buf, size, Scope.LOCAL)

    def register_global(self, buf, size: int | None = None) -> MemSlot:
        return self._register(buf, size, Scope.GLOBAL)

    def _register(self, buf, size, scope: Scope) -> MemSlot:
        self._require_active()
        view = _as_bytes_view(buf, size)
        if len(self._slots) >= self._slot_limit():
            raise OutOfCapacity(
                f"memory register full ({len(self._slots)}/{self._slot_limit()} slots)")
        if scope is Scope.LOCAL:
            slot = MemSlot(self._n_local, scope)
            self._n_local += 1
        else:
            slot = MemSlot(self._n_global, scope)
            self._n_global += 1
        self._slots[slot.wire] = view
        return slot

    def deregister(self, slot: MemSlot) -> None:
        self._require_active()
        if self._slots.pop(slot.wire, None) is None:
            raise FatalError(f"{slot} is not registered")

    # -- capacities ------------------------------------------------------

    def _reserve(self, n: int) -> list:
        if n > self.config.max_entries:
            raise OutOfMemory(f"cannot reserve {n} entries (limit {self.config.max_entries})")
        try:
            return [None] * n
        except MemoryError:
            raise OutOfMemory(f"cannot reserve {n} entries") from None

    def resize_memory_register(self, n_slots: int) -> None:
        self._require_active()
        if n_slots < 0:
            raise ValueError("slot count must be non-negative")
        if n_slots < len(self._slots):
            raise ValueError(f"{len(self._slots)} slots are live; cannot shrink to {n_slots}")
        reserved = self._reserve(n_slots)
        pending = self._pending or replace(self._active)
        self._pending = replace(pending, slots=n_slots)
        self._pending_reserved = (reserved, self._pending_reserved[1])

    def resize_message_queue(self, n_msgs: int) -> None:
        self._require_active()
        if n_msgs < 0:
            raise ValueError("message count must be non-negative")
        reserved = self._reserve(n_msgs)
        pending = self._pending or replace(self._active)
        self._pending = replace(pending, msgs=n_msgs)
        self._pending_reserved = (self._pending_reserved[0], reserved)

    def _activate_capacities(self) -> None:
        if self._pending is None:
            return
        self._active = self._pending
        slots, msgs = self._pending_reserved
        self._reserved = (slots if slots is not None else self._reserved[0],
                          msgs if msgs is not None else self._reserved[1])
        self._pending = None
        self._pending_reserved = (None, None)

    # -- communication ---------------------------------------------------

    def _check_local(self, slot: MemSlot, offset: int, size: int, writable: bool) -> int:
        view = self._slots.get(slot.wire)
        if view is None:
            raise FatalError(f"{slot} is not registered")
        if offset < 0 or size < 0 or offset + size > view.nbytes:
            raise FatalError(
                f"range [{offset}, {offset + size}) outside {slot} of {view.nbytes} bytes")
        if writable and view.readonly and size:
            raise FatalError(f"{slot} is read-only")
        return slot.wire

    def _check_remote(self, pid: int, slot: MemSlot, offset: int, size: int) -> None:
        if not 0 <= pid < self.nprocs:
            raise FatalError(f"process id {pid} outside [0, {self.nprocs})")
        if slot.scope is not Scope.GLOBAL:
            raise FatalError(f"{slot} is local and cannot be addressed remotely")
        if offset < 0 or size < 0:
            raise FatalError("negative offset or size")

    def put(self, src_slot: MemSlot, src_offset: int, dst_pid: int, dst_slot: MemSlot,
            dst_offset: int, size: int, attr: MsgAttr = MSG_DEFAULT) -> None:
        self._require_active()
        if len(self._queue) >= self._active.msgs:
            raise OutOfCapacity(f"message queue full ({self._active.msgs} requests)")
        local = self._check_local(src_slot, src_offset, size, writable=False)
        self._check_remote(dst_pid, dst_slot, dst_offset, size)
        self._queue.append(Request(PUT, dst_pid, local, src_offset,
                                   dst_slot.wire, dst_offset, size, attr.value))

    def get(self, src_pid: int, src_slot: MemSlot, src_offset: int, dst_slot: MemSlot,
            dst_offset: int, size: int, attr: MsgAttr = MSG_DEFAULT) -> None:
        self._require_active()
        if len(self._queue) >= self._active.msgs:
            raise OutOfCapacity(f"message queue full ({self._active.msgs} requests)")
        local = self._check_local(dst_slot, dst_offset, size, writable=True)
        self._check_remote(src_pid, src_slot, src_offset, size)
        if self.config.debug and size:
            view = self._slots[local]
            self._guards.append((local, dst_offset, size,
                                 zlib.crc32(view[dst_offset:dst_offset + size])))
        self._queue.append(Request(GET, src_pid, local, dst_offset,
                                   src_slot.wire, src_offset, size, attr.value))

    def sync(self, attr: SyncAttr = SYNC_DEFAULT) -> None:
        from lpf.sync.engine import run_superstep

        self._require_active()
        try:
            run_superstep(self)
        except FatalError:
            self._state = "failed"
            raise

    def account_h(self, word_size: int = 1):
        """Collective: the h-relation the pending superstep would realise."""
        from lpf.sync.engine import account_h

        self._require_active()
        return account_h(self, word_size)

    def probe(self) -> machine.MachineParams:
        return machine.lookup(self.nprocs)

    # -- process management ----------------------------------------------

    def exec(self, max_p: int | None, spmd, args: Args = NO_ARGS, **options) -> None:
        from lpf.shm import exec_group

        self._require_active()
        self._state = "suspended"
        try:
            exec_group(self, max_p, spmd, args, **options)
        finally:
            self._state = "active"

    def rehook(self, spmd, args: Args = NO_ARGS):
        """Run ``spmd`` on the same processes in a pristine context."""
        self._require_active()
        channel = self._channel
        inner = Context(self.pid, self.nprocs, channel, self.config)
        channel.barrier()
        self._state = "suspended"
        channel.publish(inner)
        try:
            result = spmd(inner, self.pid, self.nprocs, args)
        except BaseException as exc:
            channel.abort(f"process {self.pid} failed inside rehook: {exc!r}")
            self._state = "failed"
            if isinstance(exc, FatalError):
                raise
            raise FatalError(f"rehooked function failed on process {self.pid}") from exc
        finally:
            inner._state = "closed"
            if self._state == "suspended":
                self._state = "active"
            channel.publish(self)
        channel.barrier()
        return result

    def __repr__(self) -> str:
        return (f"Context(pid={self.pid}, nprocs={self.nprocs}, slots={len(self._slots)}/"
                f"{self._active.slots}, queued={len(self._queue)}/{self._active.msgs})")


_root: Context | None = None


def root_context() -> Context:
    """The default sequential context (p = 1)."""
    global _root
    if _root is None:
        from lpf.shm import solo_channel

        _root = Context(0, 1, solo_channel(), Config.from_env())
    return _root
