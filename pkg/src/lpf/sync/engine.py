"""The superstep behind ``Context.sync``.

1. barrier + first metadata exchange: every request travels to the process
   whose memory it touches remotely (put destination, get source);
2. conflict resolution at each data destination, then a second metadata
   exchange telling every source which byte ranges to deliver;
3. payload exchange, written at the destination;
4. final barrier.

Remote errors (bad slot, range or capacity) are flagged in the second
exchange so that every process raises in the same superstep and nobody is
left waiting.
"""

from __future__ import annotations

import struct
import zlib
from collections import defaultdict
from dataclasses import dataclass, field

from lpf.errors import FatalError
from lpf.sync.conflicts import WriteInterval, overlapping, resolve_conflicts
from lpf.sync.exchange import ExchangeStats, exchange_bruck_randomized, exchange_direct
from lpf.sync.wire import (
    GET, LOCAL_BIT, MAGIC_META, MAGIC_PLAN, MAGIC_STATS, PUT, MetaRecord, PlanHeader, WireError,
    decode_meta, decode_plan, encode_meta, encode_plan,
)


@dataclass
class SyncStats:
    """Per-process words sent (t) and received (r) for one superstep."""

    t: list[int]
    r: list[int]
    h: int
    m: int
    h_small: int
    h_big: int
    small_limit: int
    word_size: int = 1
    msgs_out: list[int] = field(default_factory=list)
    msgs_in: list[int] = field(default_factory=list)

    @classmethod
    def from_counts(cls, t, r, *, t_small=None, r_small=None, t_big=None, r_big=None,
                    msgs_out=None, msgs_in=None, small_limit: int = 4096,
                    word_size: int = 1) -> SyncStats:
        def words(xs):
            return [-(-int(x) // word_size) for x in xs]

        def hrel(a, b):
            return max((max(x, y) for x, y in zip(a, b)), default=0)

        t, r = words(t), words(r)
        zeros = [0] * len(t)
        ts, rs = words(t_small or zeros), words(r_small or zeros)
        tb, rb = words(t_big or zeros), words(r_big or zeros)
        mo, mi = list(msgs_out or zeros), list(msgs_in or zeros)
        return cls(t=t, r=r, h=hrel(t, r), m=hrel(mo, mi), h_small=hrel(ts, rs),
                   h_big=hrel(tb, rb), small_limit=small_limit, word_size=word_size,
                   msgs_out=mo, msgs_in=mi)

    @classmethod
    def from_headers(cls, headers: list[PlanHeader], small_limit: int,
                     word_size: int = 1) -> SyncStats:
        return cls.from_counts(
            [hd.sent for hd in headers], [hd.received for hd in headers],
            t_small=[hd.sent_small for hd in headers],
            r_small=[hd.received_small for hd in headers],
            t_big=[hd.sent_big for hd in headers],
            r_big=[hd.received_big for hd in headers],
            msgs_out=[hd.msgs_out for hd in headers],
            msgs_in=[hd.msgs_in for hd in headers],
            small_limit=small_limit, word_size=word_size)

    def in_words(self, word_size: int) -> SyncStats:
        return SyncStats.from_counts(
            [x * self.word_size for x in self.t], [x * self.word_size for x in self.r],
            msgs_out=self.msgs_out, msgs_in=self.msgs_in,
            small_limit=self.small_limit, word_size=word_size)


def _meta_exchange(ctx, frames: list[bytes], tag: bytes) -> list[bytes]:
    if ctx.exchange_stats is None:
        ctx.exchange_stats = ExchangeStats()
    if ctx.config.meta_exchange == "bruck":
        return exchange_bruck_randomized(ctx.channel, frames, ctx.rng, ctx.exchange_stats)
    if ctx.config.meta_exchange != "direct":
        raise FatalError(f"unknown metadata exchange {ctx.config.meta_exchange!r}")
    return exchange_direct(ctx.channel, frames, tag, ctx.exchange_stats)


class _Tally:
    __slots__ = ("sent", "received", "sent_small", "received_small", "sent_big",
                 "received_big", "limit")

    def __init__(self, limit: int):
        self.limit = limit
        self.sent = self.received = 0
        self.sent_small = self.received_small = self.sent_big = self.received_big = 0

    def send(self, n: int) -> None:
        self.sent += n
        if n <= self.limit:
            self.sent_small += n
        else:
            self.sent_big += n

    def receive(self, n: int) -> None:
        self.received += n
        if n <= self.limit:
            self.received_small += n
        else:
            self.received_big += n


def run_superstep(ctx) -> None:
    p, s = ctx.nprocs, ctx.pid
    channel = ctx.channel
    queue = ctx._queue
    debug = ctx.config.debug
    problems: list[str] = []

    if debug:
        for slot, off, size, crc in ctx._guards:
            if zlib.crc32(ctx._slots[slot][off:off + size]) != crc:
                problems.append(f"get target {slot & ~LOCAL_BIT} modified before sync")

    # phase 1: requests go to the process whose memory they touch remotely
    outgoing: list[list[MetaRecord]] = [[] for _ in range(p)]
    tally = _Tally(ctx.config.small_limit)
    for idx, req in enumerate(queue):
        outgoing[req.remote].append(MetaRecord(
            s, req.kind, req.remote_slot, req.remote_offset, req.size,
            req.local_slot, req.local_offset, req.attr, idx))
        if req.kind == PUT:
            tally.send(req.size)
        else:
            tally.receive(req.size)
    try:
        frames = _meta_exchange(ctx, [encode_meta(r, ctx._n_global) for r in outgoing],
                                MAGIC_META)
        decoded_meta = [decode_meta(f) for f in frames]
    except WireError as exc:
        channel.abort(str(exc))
        raise FatalError(f"corrupt metadata: {exc}") from exc

    intervals: list[WriteInterval] = []
    writers: list[tuple[int, int, int, int, int]] = []   # src pid, src slot, src off, dst slot, dst begin
    reads: list[tuple[int, int, int]] = []
    n_incoming = 0
    for src, (n_global, records) in enumerate(decoded_meta):
        if debug and n_global != ctx._n_global:
            problems.append(f"process {src} registered {n_global} global slots, "
                            f"process {s} registered {ctx._n_global}")
        n_incoming += len(records)
        for rec in records:
            where = _check_incoming(ctx, rec)
            if where:
                problems.append(where)
                continue
            if rec.kind == PUT:
                tally.receive(rec.size)
                if rec.size:
                    intervals.append(WriteInterval(
                        rec.remote_slot, rec.remote_offset, rec.remote_offset + rec.size,
                        len(writers), (rec.initiator, rec.index)))
                    writers.append((src, rec.local_slot, rec.local_offset,
                                    rec.remote_slot, rec.remote_offset))
            else:
                tally.send(rec.size)
                reads.append((rec.remote_slot, rec.remote_offset, rec.remote_offset + rec.size))
    if n_incoming > ctx.capacity_msgs:
        problems.append(f"process {s} is subject to {n_incoming} requests but its "
                        f"message queue holds {ctx.capacity_msgs}")

    for idx, req in enumerate(queue):
        if req.kind == GET and req.size:
            intervals.append(WriteInterval(
                req.local_slot, req.local_offset, req.local_offset + req.size,
                len(writers), (s, idx)))
            writers.append((req.remote, req.remote_slot, req.remote_offset,
                            req.local_slot, req.local_offset))
        elif req.kind == PUT:
            reads.append((req.local_slot, req.local_offset, req.local_offset + req.size))

    if debug and overlapping(reads, [(iv.slot, iv.begin, iv.end) for iv in intervals]):
        problems.append(f"process {s}: memory is both read and written in one superstep")

    # phase 2: tell every source what it still has to deliver
    clipped = resolve_conflicts(intervals) if not problems else {}
    pulls: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    recv_plan: dict[int, list[tuple[int, int, int, int, int]]] = defaultdict(list)
    for rid, pieces in clipped.items():
        src, src_slot, src_off, dst_slot, dst_begin = writers[rid]
        for lo, hi in pieces:
            delta = lo - dst_begin
            pulls[src].append((src_slot, src_off + delta, hi - lo))
            recv_plan[src].append((dst_slot, lo, hi - lo, src_slot, src_off + delta))

    header = PlanHeader(
        error=bool(problems), sent=tally.sent, received=tally.received,
        sent_small=tally.sent_small, received_small=tally.received_small,
        sent_big=tally.sent_big, received_big=tally.received_big,
        msgs_out=len(queue), msgs_in=n_incoming)
    plan_frames = [encode_plan(header, pulls.get(d, [])) for d in range(p)]
    try:
        replies = _meta_exchange(ctx, plan_frames, MAGIC_PLAN)
        decoded = [decode_plan(f) for f in replies]
    except WireError as exc:
        channel.abort(str(exc))
        raise FatalError(f"corrupt plan: {exc}") from exc

    headers = [hd for hd, _ in decoded]
    if problems:
        raise FatalError("; ".join(problems))
    failed = [q for q, hd in enumerate(headers) if hd.error]
    if failed:
        raise FatalError(f"superstep aborted by error on process(es) {failed}")

    # phase 3 and 4
    send_plans = {d: entries for d, (_, entries) in enumerate(decoded) if entries}
    channel.data_exchange(ctx, recv_plan, send_plans)
    channel.barrier()
    channel.counters.supersteps += 1

    queue.clear()
    ctx._guards.clear()
    ctx._activate_capacities()
    ctx.last_stats = SyncStats.from_headers(headers, ctx.config.small_limit)
    if ctx.trace is not None:
        ctx.trace.append(ctx.last_stats)


def _check_incoming(ctx, rec: MetaRecord) -> str | None:
    what = "put into" if rec.kind == PUT else "get from"
    if rec.remote_slot & LOCAL_BIT:
        return f"process {rec.initiator}: {what} a local slot of process {ctx.pid}"
    view = ctx._slots.get(rec.remote_slot)
    if view is None:
        return (f"process {rec.initiator}: {what} unregistered global slot "
                f"{rec.remote_slot} on process {ctx.pid}")
    if rec.remote_offset + rec.size > view.nbytes:
        return (f"process {rec.initiator}: {what} [{rec.remote_offset}, "
                f"{rec.remote_offset + rec.size}) exceeds {view.nbytes}-byte slot "
                f"{rec.remote_slot} on process {ctx.pid}")
    if rec.kind == PUT and view.readonly and rec.size:
        return f"process {rec.initiator}: put into read-only slot on process {ctx.pid}"
    return None


_COUNTS = struct.Struct("<QQQQQQII")


def account_h(ctx, word_size: int = 1) -> SyncStats:
    """Collective over two control exchanges; moves no payload."""
    p, s = ctx.nprocs, ctx.pid
    limit = ctx.config.small_limit
    contrib = [[0] * 8 for _ in range(p)]
    for req in ctx._queue:
        small = req.size <= limit
        sender, receiver = (s, req.remote) if req.kind == PUT else (req.remote, s)
        for who, base in ((sender, 0), (receiver, 1)):
            row = contrib[who]
            row[base] += req.size
            row[base + (2 if small else 4)] += req.size
        contrib[s][6] += 1
        contrib[req.remote][7] += 1
    # row layout: t, r, t_small, r_small, t_big, r_big, out, in
    blocks = [MAGIC_STATS + _COUNTS.pack(*row) for row in contrib]
    got = ctx.channel.alltoall(blocks, MAGIC_STATS)
    mine = [0] * 8
    for frame in got:
        for i, v in enumerate(_COUNTS.unpack_from(frame, 4)):
            mine[i] += v
    everyone = ctx.channel.alltoall([MAGIC_STATS + _COUNTS.pack(*mine)] * p, MAGIC_STATS)
    rows = [_COUNTS.unpack_from(f, 4) for f in everyone]
    return SyncStats.from_counts(
        [r[0] for r in rows], [r[1] for r in rows],
        t_small=[r[2] for r in rows], r_small=[r[3] for r in rows],
        t_big=[r[4] for r in rows], r_big=[r[5] for r in rows],
        msgs_out=[r[6] for r in rows], msgs_in=[r[7] for r in rows],
        small_limit=limit, word_size=word_size)
