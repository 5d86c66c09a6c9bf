import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpf.sync.conflicts import (
    WriteInterval, overlapping, radix_argsort, resolve_conflicts, sort_intervals,
)


def last_writer(intervals):
    """Byte-wise oracle: apply writes in ascending key order, remember the owner."""
    owner = {}
    for iv in sorted(intervals, key=lambda iv: iv.key):
        for b in range(iv.begin, iv.end):
            owner[(iv.slot, b)] = iv.rid
    return owner


def survivors_to_owner(intervals, clipped):
    slot_of = {iv.rid: iv.slot for iv in intervals}
    owner = {}
    for rid, pieces in clipped.items():
        for lo, hi in pieces:
            for b in range(lo, hi):
                assert (slot_of[rid], b) not in owner, "byte received twice"
                owner[(slot_of[rid], b)] = rid
    return owner


def test_full_overlap_higher_key_wins():
    a = WriteInterval(0, 0, 8, rid=0, key=(0, 1))
    b = WriteInterval(0, 0, 8, rid=1, key=(0, 2))
    assert resolve_conflicts([a, b]) == {0: [], 1: [(0, 8)]}


def test_disjoint_writes_untouched():
    a = WriteInterval(0, 0, 4, rid=0, key=(0, 0))
    b = WriteInterval(0, 4, 8, rid=1, key=(1, 0))
    assert resolve_conflicts([a, b]) == {0: [(0, 4)], 1: [(4, 8)]}


def test_partial_overlap_clipped():
    a = WriteInterval(0, 0, 6, rid=0, key=(0, 1))
    b = WriteInterval(0, 4, 10, rid=1, key=(0, 2))
    assert resolve_conflicts([a, b]) == {0: [(0, 4)], 1: [(4, 10)]}


def test_low_key_split_around_high_key():
    outer = WriteInterval(0, 0, 10, rid=0, key=(0, 0))
    inner = WriteInterval(0, 3, 5, rid=1, key=(1, 0))
    assert resolve_conflicts([outer, inner]) == {0: [(0, 3), (5, 10)], 1: [(3, 5)]}


def test_same_range_different_slots_do_not_conflict():
    a = WriteInterval(0, 0, 8, rid=0, key=(0, 0))
    b = WriteInterval(1, 0, 8, rid=1, key=(0, 1))
    assert resolve_conflicts([a, b]) == {0: [(0, 8)], 1: [(0, 8)]}


def test_empty_intervals_receive_nothing():
    a = WriteInterval(0, 4, 4, rid=0, key=(0, 0))
    assert resolve_conflicts([a]) == {0: []}
    assert resolve_conflicts([]) == {}


@pytest.mark.parametrize("keys", [[], [5], [3, 1, 2], [0, 0, 1], [70000, 3, 65536, 255, 256]])
def test_radix_argsort_matches_sorted(keys):
    order = radix_argsort(keys)
    assert [keys[i] for i in order] == sorted(keys)
    # stable: equal keys keep their input order
    assert order == sorted(range(len(keys)), key=lambda i: keys[i])


def test_sort_intervals_by_slot_then_begin():
    ivs = [WriteInterval(s, b, b + 1, i, (0, i))
           for i, (s, b) in enumerate([(1, 5), (0, 9), (1, 0), (0, 2)])]
    assert [(iv.slot, iv.begin) for iv in sort_intervals(ivs)] == [(0, 2), (0, 9), (1, 0), (1, 5)]


interval_sets = st.lists(
    st.tuples(st.integers(0, 2), st.integers(0, 40), st.integers(0, 12)),
    max_size=25,
)


@settings(max_examples=300, deadline=None)
@given(interval_sets, st.randoms(use_true_random=False))
def test_matches_byte_oracle(spec, rnd):
    keys = list(range(len(spec)))
    rnd.shuffle(keys)
    ivs = [WriteInterval(s, b, b + n, rid, (keys[rid] % 4, keys[rid]))
           for rid, (s, b, n) in enumerate(spec)]
    clipped = resolve_conflicts(ivs)
    assert survivors_to_owner(ivs, clipped) == last_writer(ivs)
    for pieces in clipped.values():
        assert pieces == sorted(pieces)
        assert all(lo < hi for lo, hi in pieces)
        # adjacent pieces are merged
        assert all(a[1] < b[0] for a, b in zip(pieces, pieces[1:]))


def test_large_random_instance():
    rng = random.Random(3)
    ivs = []
    for rid in range(2000):
        b = rng.randrange(1 << 20)
        ivs.append(WriteInterval(rng.randrange(4), b, b + rng.randrange(1, 5000),
                                 rid, (rng.randrange(64), rid)))
    clipped = resolve_conflicts(ivs)
    covered = sum(hi - lo for pieces in clipped.values() for lo, hi in pieces)
    union = {}
    for iv in ivs:
        union.setdefault(iv.slot, []).append((iv.begin, iv.end))
    expected = 0
    for spans in union.values():
        spans.sort()
        cur_lo, cur_hi = spans[0]
        for lo, hi in spans[1:]:
            if lo > cur_hi:
                expected += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        expected += cur_hi - cur_lo
    assert covered == expected


@pytest.mark.parametrize("reads, writes, hit", [
    ([], [(0, 0, 4)], False),
    ([(0, 0, 4)], [(0, 4, 8)], False),
    ([(0, 0, 5)], [(0, 4, 8)], True),
    ([(1, 0, 8)], [(0, 0, 8)], False),
    ([(0, 2, 3)], [(0, 0, 8)], True),
    ([(0, 3, 3)], [(0, 0, 8)], False),
])
def test_overlapping(reads, writes, hit):
    assert overlapping(reads, writes) is hit
