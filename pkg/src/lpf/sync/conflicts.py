"""Destination-side write-conflict resolution.

Concurrent writes to the same bytes are resolved as if applied one after the
other in ascending order key, so the writer with the highest key owns each
byte. Intervals are radix-sorted on (slot, begin) and swept once while a heap
tracks the highest-keyed interval covering the current position.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

_RADIX_BITS = 8
_RADIX_MASK = (1 << _RADIX_BITS) - 1


@dataclass(frozen=True, slots=True)
class WriteInterval:
    slot: int
    begin: int
    end: int
    rid: int
    key: tuple[int, int]


def radix_argsort(keys: list[int]) -> list[int]:
    """Stable LSD radix sort of non-negative ints; returns the permutation."""
    order = list(range(len(keys)))
    if len(keys) < 2:
        return order
    top = max(keys)
    shift = 0
    while True:
        buckets: list[list[int]] = [[] for _ in range(1 << _RADIX_BITS)]
        for i in order:
            buckets[(keys[i] >> shift) & _RADIX_MASK].append(i)
        order = [i for b in buckets if b for i in b]
        shift += _RADIX_BITS
        if top >> shift == 0:
            return order


def sort_intervals(intervals: list[WriteInterval]) -> list[WriteInterval]:
    by_begin = radix_argsort([iv.begin for iv in intervals])
    staged = [intervals[i] for i in by_begin]
    by_slot = radix_argsort([iv.slot for iv in staged])
    return [staged[i] for i in by_slot]


def resolve_conflicts(intervals: list[WriteInterval]) -> dict[int, list[tuple[int, int]]]:
    """Clip ``intervals`` so every covered byte is received exactly once.

    Returns request id -> sorted, disjoint [begin, end) pieces it still has to
    deliver. Requests that lose every byte map to an empty list.
    """
    result: dict[int, list[tuple[int, int]]] = {iv.rid: [] for iv in intervals}
    live = [iv for iv in intervals if iv.end > iv.begin]
    ordered = sort_intervals(live)

    i, n = 0, len(ordered)
    while i < n:
        slot = ordered[i].slot
        j = i
        while j < n and ordered[j].slot == slot:
            j += 1
        _sweep(ordered[i:j], result)
        i = j
    return result


def _sweep(group: list[WriteInterval], out: dict[int, list[tuple[int, int]]]) -> None:
    heap: list[tuple[tuple[int, int], int, int]] = []  # (-key, end, rid)
    nxt, n = 0, len(group)
    pos = group[0].begin
    while nxt < n or heap:
        if not heap and nxt < n and group[nxt].begin > pos:
            pos = group[nxt].begin
        while nxt < n and group[nxt].begin <= pos:
            iv = group[nxt]
            heapq.heappush(heap, ((-iv.key[0], -iv.key[1]), iv.end, iv.rid))
            nxt += 1
        while heap and heap[0][1] <= pos:
            heapq.heappop(heap)
        if not heap:
            continue
        _, end, rid = heap[0]
        stop = end if nxt >= n else min(end, group[nxt].begin)
        pieces = out[rid]
        if pieces and pieces[-1][1] == pos:
            pieces[-1] = (pieces[-1][0], stop)
        else:
            pieces.append((pos, stop))
        pos = stop


def overlapping(a: list[tuple[int, int, int]], b: list[tuple[int, int, int]]) -> bool:
    """Whether any (slot, begin, end) range in ``a`` shares bytes with one in ``b``."""
    events = sorted(
        [(s, lo, hi, 0) for s, lo, hi in a if hi > lo]
        + [(s, lo, hi, 1) for s, lo, hi in b if hi > lo]
    )
    reach = {}
    for slot, lo, hi, side in events:
        other = reach.get((slot, 1 - side), -1)
        if other > lo:
            return True
        reach[(slot, side)] = max(reach.get((slot, side), -1), hi)
    return False
