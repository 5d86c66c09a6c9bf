"""Total exchanges of per-destination byte blocks.

``exchange_direct`` sends one message to every peer. The randomized variant
routes every block through a uniformly random intermediate process, and both
legs use Bruck's index algorithm: ceil(log2 p) rounds, in round j each
process forwards to pid + 2**j every packet whose remaining distance has bit
j set. That costs 2 ceil(log2 p) messages per process instead of p - 1, while
a block travels up to 2 ceil(log2 p) hops.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from lpf.sync.wire import MAGIC_META, MAGIC_ROUTE, WireError

_PACKET = struct.Struct("<IIII")  # route, final, source, length


@dataclass
class ExchangeStats:
    rounds: int = 0
    messages: int = 0
    payload_bytes: int = 0          # block bytes handed to other processes
    intermediate_blocks: int = 0    # blocks parked here between the two legs
    intermediate_bytes: int = 0


def rounds_needed(p: int) -> int:
    return (p - 1).bit_length()


def exchange_direct(channel, blocks: list[bytes], tag: bytes = MAGIC_META,
                    stats: ExchangeStats | None = None) -> list[bytes]:
    p, s = channel.nprocs, channel.pid
    if len(blocks) != p:
        raise ValueError(f"expected {p} blocks, got {len(blocks)}")
    out = channel.alltoall(blocks, tag)
    if stats is not None:
        stats.messages += p - 1
        stats.payload_bytes += sum(len(b) for d, b in enumerate(blocks) if d != s)
    return out


def exchange_bruck_randomized(channel, blocks: list[bytes], rng: random.Random,
                              stats: ExchangeStats | None = None) -> list[bytes]:
    p, s = channel.nprocs, channel.pid
    if len(blocks) != p:
        raise ValueError(f"expected {p} blocks, got {len(blocks)}")
    if p == 1:
        return [bytes(blocks[0])]
    stats = stats if stats is not None else ExchangeStats()

    packets = [(rng.randrange(p), d, s, bytes(blocks[d])) for d in range(p)]
    parked = _route(channel, packets, stats)
    stats.intermediate_blocks += len(parked)
    stats.intermediate_bytes += sum(len(pk[3]) for pk in parked)

    packets = [(final, final, src, data) for _, final, src, data in parked]
    arrived = _route(channel, packets, stats)

    out: list[bytes | None] = [None] * p
    for _, final, src, data in arrived:
        if final != s or out[src] is not None:
            raise WireError("misrouted block")
        out[src] = data
    if any(b is None for b in out):
        raise WireError("missing block after routing")
    return out  # type: ignore[return-value]


def _route(channel, packets, stats: ExchangeStats):
    p, s = channel.nprocs, channel.pid
    held = packets
    for j in range(rounds_needed(p)):
        hop = 1 << j
        keep, send = [], []
        for pk in held:
            (send if ((pk[0] - s) % p) & hop else keep).append(pk)
        msg = _pack(send)
        got = channel.shift((s + hop) % p, msg, (s - hop) % p, MAGIC_ROUTE)
        keep.extend(_unpack(got))
        held = keep
        stats.rounds += 1
        stats.messages += 1
        stats.payload_bytes += sum(len(pk[3]) for pk in send)
    for pk in held:
        if pk[0] != s:
            raise WireError("packet not at its routing target")
    return held


def _pack(packets) -> bytes:
    parts = []
    for route, final, src, data in packets:
        parts.append(_PACKET.pack(route, final, src, len(data)))
        parts.append(data)
    return b"".join(parts)


def _unpack(buf) -> list[tuple[int, int, int, bytes]]:
    view = memoryview(buf)
    out, off = [], 0
    while off < len(view):
        route, final, src, n = _PACKET.unpack_from(view, off)
        off += _PACKET.size
        if off + n > len(view):
            raise WireError("truncated routing packet")
        out.append((route, final, src, bytes(view[off:off + n])))
        off += n
    return out
