"""Fixed-width little-endian encodings for the frames exchanged during a sync.

A metadata record describes one queued put or get. Layout::

    u32 initiator | u8 kind | (u32 slot, u64 offset, u64 size) remote
                            | (u32 slot, u64 offset, u64 size) local
                            | u32 attr | u32 queue index

Every frame starts with a 4-byte versioned magic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

PUT = 0
GET = 1

# slot ids on the wire carry their scope in the top bit
LOCAL_BIT = 1 << 31

MAGIC_META = b"LPM1"
MAGIC_PLAN = b"LPP1"
MAGIC_DATA = b"LPD1"
MAGIC_BARRIER = b"LPB1"
MAGIC_ROUTE = b"LPR1"
MAGIC_STATS = b"LPS1"
MAGIC_HOOK = b"LPH1"
MAGIC_ABORT = b"LPAB"

_RECORD = struct.Struct("<IBIQQIQQII")
_META_HEADER = struct.Struct("<4sII")
# error flag, t, r, t_small, r_small, t_big, r_big, msgs out, msgs in, n entries
_PLAN_HEADER = struct.Struct("<4sBQQQQQQIII")
_PLAN_ENTRY = struct.Struct("<IQQ")

RECORD_SIZE = _RECORD.size


class WireError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class MetaRecord:
    initiator: int
    kind: int
    remote_slot: int
    remote_offset: int
    size: int
    local_slot: int
    local_offset: int
    attr: int
    index: int

    def pack(self) -> bytes:
        return _RECORD.pack(
            self.initiator, self.kind,
            self.remote_slot, self.remote_offset, self.size,
            self.local_slot, self.local_offset, self.size,
            self.attr, self.index,
        )

    @classmethod
    def unpack_from(cls, buf, offset: int = 0) -> MetaRecord:
        (initiator, kind, rslot, roff, rsize,
         lslot, loff, lsize, attr, index) = _RECORD.unpack_from(buf, offset)
        if rsize != lsize:
            raise WireError("record sizes disagree")
        if kind not in (PUT, GET):
            raise WireError(f"unknown request kind {kind}")
        return cls(initiator, kind, rslot, roff, rsize, lslot, loff, attr, index)


def encode_meta(records: list[MetaRecord], n_global: int) -> bytes:
    parts = [_META_HEADER.pack(MAGIC_META, n_global, len(records))]
    parts.extend(r.pack() for r in records)
    return b"".join(parts)


def decode_meta(frame) -> tuple[int, list[MetaRecord]]:
    frame = memoryview(frame)
    if len(frame) < _META_HEADER.size:
        raise WireError("truncated metadata frame")
    magic, n_global, count = _META_HEADER.unpack_from(frame, 0)
    if magic != MAGIC_META:
        raise WireError(f"bad metadata magic {magic!r}")
    if len(frame) != _META_HEADER.size + count * RECORD_SIZE:
        raise WireError("metadata frame length mismatch")
    off = _META_HEADER.size
    records = []
    for _ in range(count):
        records.append(MetaRecord.unpack_from(frame, off))
        off += RECORD_SIZE
    return n_global, records


@dataclass(slots=True)
class PlanHeader:
    error: bool = False
    sent: int = 0
    received: int = 0
    sent_small: int = 0
    received_small: int = 0
    sent_big: int = 0
    received_big: int = 0
    msgs_out: int = 0
    msgs_in: int = 0


def encode_plan(header: PlanHeader, entries: list[tuple[int, int, int]]) -> bytes:
    """Second metadata frame: which (slot, offset, length) source ranges to send."""
    parts = [_PLAN_HEADER.pack(
        MAGIC_PLAN, int(header.error),
        header.sent, header.received,
        header.sent_small, header.received_small,
        header.sent_big, header.received_big,
        header.msgs_out, header.msgs_in, len(entries),
    )]
    parts.extend(_PLAN_ENTRY.pack(*e) for e in entries)
    return b"".join(parts)


def decode_plan(frame) -> tuple[PlanHeader, list[tuple[int, int, int]]]:
    frame = memoryview(frame)
    if len(frame) < _PLAN_HEADER.size:
        raise WireError("truncated plan frame")
    (magic, err, t, r, ts, rs, tb, rb, mo, mi, count) = _PLAN_HEADER.unpack_from(frame, 0)
    if magic != MAGIC_PLAN:
        raise WireError(f"bad plan magic {magic!r}")
    if len(frame) != _PLAN_HEADER.size + count * _PLAN_ENTRY.size:
        raise WireError("plan frame length mismatch")
    entries = list(_PLAN_ENTRY.iter_unpack(frame[_PLAN_HEADER.size:]))
    return PlanHeader(bool(err), t, r, ts, rs, tb, rb, mo, mi), entries
