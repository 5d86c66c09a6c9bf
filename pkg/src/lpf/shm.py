"""Shared-memory backend: one thread per process.

Threads exchange metadata through a p x p grid of mailboxes (slot (i, j) is
written only by i and read only by j) and synchronise through a combining
tree barrier. Payload never moves at the source: each destination thread
copies the bytes it was granted straight out of the source's registered
memory, so no two threads write into the same region.
"""

from __future__ import annotations

import logging
import os
import threading
import time

from lpf.core import Args, Config, Context
from lpf.errors import FatalError
from lpf.sync.barrier import TreeBarrier
from lpf.sync.channel import Channel, Counters

log = logging.getLogger(__name__)

THREAD_LIMIT = 1024
FANIN_CANDIDATES = (2, 4, 8)
DEFAULT_FANIN = 4
_TUNE_ROUNDS = 16

_tuned_fanin: dict[int, int] = {}
_tune_lock = threading.Lock()


def max_procs() -> int:
    """What ``MAX_P`` resolves to: the number of logical cores, or LPF_MAX_P."""
    env = os.environ.get("LPF_MAX_P")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


class ThreadGroup:
    def __init__(self, p: int, config: Config | None = None):
        self.p = p
        self.config = config or Config.from_env()
        fanin = self.config.barrier_fanin or _tuned_fanin.get(p, DEFAULT_FANIN)
        self.barrier = TreeBarrier(p, fanin)
        self._barriers = [self.barrier]
        self.mail = [[[b""] * p for _ in range(p)] for _ in range(2)]
        self.contexts: list[Context | None] = [None] * p
        self.needs_tuning = (p > 1 and self.config.barrier_fanin is None
                             and p not in _tuned_fanin)
        self.channels = [ShmChannel(self, pid) for pid in range(p)]

    def fail(self, reason: str) -> None:
        for b in self._barriers:
            b.fail(reason)

    def leave(self, pid: int) -> None:
        for b in self._barriers:
            b.leave(pid)

    def autotune(self, pid: int) -> None:
        """Collective: time every candidate fan-in and keep the fastest."""
        base = self.barrier
        if pid == 0:
            self._candidates = {f: TreeBarrier(self.p, f) for f in FANIN_CANDIDATES}
            self._barriers.extend(self._candidates.values())
            self._timings = {}
        base.wait(pid)
        for f in FANIN_CANDIDATES:
            candidate = self._candidates[f]
            base.wait(pid)
            start = time.perf_counter()
            for _ in range(_TUNE_ROUNDS):
                candidate.wait(pid)
            if pid == 0:
                self._timings[f] = time.perf_counter() - start
        base.wait(pid)
        if pid == 0:
            best = min(self._timings, key=self._timings.get)
            with _tune_lock:
                _tuned_fanin.setdefault(self.p, best)
            self.barrier = self._candidates[best]
            log.debug("barrier fan-in for p=%d: %d (%s)", self.p, best, self._timings)
        base.wait(pid)


class ShmChannel(Channel):
    def __init__(self, group: ThreadGroup, pid: int):
        self.group = group
        self.pid = pid
        self.nprocs = group.p
        self.counters = Counters()
        self._parity = 0

    def barrier(self) -> None:
        self.group.barrier.wait(self.pid)

    def alltoall(self, blocks, tag):
        box = self.group.mail[self._parity]
        self._parity ^= 1
        s = self.pid
        row = box[s]
        for d, block in enumerate(blocks):
            row[d] = block
        self.group.barrier.wait(s)
        self.counters.messages += self.nprocs - 1
        self.counters.control_bytes += sum(len(b) for d, b in enumerate(blocks) if d != s)
        return [box[src][s] for src in range(self.nprocs)]

    def shift(self, dst, data, src, tag):
        box = self.group.mail[self._parity]
        self._parity ^= 1
        box[self.pid][dst] = data
        self.group.barrier.wait(self.pid)
        if dst != self.pid:
            self.counters.messages += 1
            self.counters.control_bytes += len(data)
        return box[src][self.pid]

    def data_exchange(self, ctx, recv_plan, send_plans) -> None:
        contexts = self.group.contexts
        copies = []
        for src, entries in recv_plan.items():
            source = ctx if src == self.pid else contexts[src]
            if source is None:
                raise FatalError(f"process {src} has no published context")
            for dst_slot, dst_off, n, src_slot, src_off in entries:
                copies.append((ctx._slots[dst_slot], dst_off,
                               source._slots[src_slot], src_off, n))
        self.counters.payload_bytes += copy_at_destination(copies)

    def publish(self, ctx) -> None:
        self.group.contexts[self.pid] = ctx

    def abort(self, reason: str) -> None:
        self.group.fail(reason)


def copy_at_destination(copies) -> int:
    """Perform (dst view, dst offset, src view, src offset, n) copies; returns bytes."""
    total = 0
    for dst, dst_off, src, src_off, n in copies:
        dst[dst_off:dst_off + n] = src[src_off:src_off + n]
        total += n
    return total


def solo_channel() -> ShmChannel:
    return ThreadGroup(1).channels[0]


def spawn_group(n: int, spmd, args_for, config: Config | None = None) -> list:
    """Run ``spmd`` on ``n`` threads and join them.

    ``args_for(pid)`` supplies each thread's :class:`Args`. Returns the
    per-thread return values; raises FatalError if any thread failed.
    """
    if n < 1:
        raise ValueError("need at least one process")
    group = ThreadGroup(n, config)
    results: list = [None] * n
    errors: list[BaseException | None] = [None] * n

    def body(pid: int) -> None:
        channel = group.channels[pid]
        ctx = Context(pid, n, channel, group.config)
        channel.publish(ctx)
        try:
            if group.needs_tuning:
                group.autotune(pid)
            results[pid] = spmd(ctx, pid, n, args_for(pid))
        except BaseException as exc:  # noqa: BLE001 - reported after join
            errors[pid] = exc
            group.fail(f"process {pid} aborted: {exc!r}")
        else:
            group.leave(pid)
        finally:
            ctx._state = "closed"

    if n == 1:
        body(0)
    else:
        threads = []
        for pid in range(n):
            t = threading.Thread(target=body, args=(pid,), name=f"lpf-{pid}", daemon=True)
            try:
                t.start()
            except RuntimeError as exc:
                group.fail("thread creation failed")
                for started in threads:
                    started.join()
                raise FatalError(f"could not start process {pid}") from exc
            threads.append(t)
        for t in threads:
            t.join()

    failed = [e for e in errors if e is not None]
    if failed:
        root = next((e for e in failed if not isinstance(e, FatalError)), failed[0])
        if isinstance(root, KeyboardInterrupt):
            raise root
        raise FatalError(f"{len(failed)} of {n} processes failed; first: {root!r}") from root
    return results


def exec_group(parent: Context, max_p: int | None, spmd, args: Args, **options) -> list:
    p = max_procs() if max_p is None else max_p
    if p < 1:
        raise ValueError("max_p must be positive")
    p = min(p, THREAD_LIMIT)
    config = parent.config.with_(**options)
    out_size = args.output_size
    outputs = [bytearray(out_size) for _ in range(p)]

    def args_for(pid: int) -> Args:
        data = bytes(args.input) if pid == 0 else b""
        return Args(input=data, output=outputs[pid], symbols=tuple(args.symbols))

    results = spawn_group(p, spmd, args_for, config)
    if out_size:
        memoryview(args.output).cast("B")[:] = outputs[0]
    return results
