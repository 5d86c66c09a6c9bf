import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpf.sync.wire import (
    GET, LOCAL_BIT, MAGIC_META, PUT, RECORD_SIZE, MetaRecord, PlanHeader, WireError,
    decode_meta, decode_plan, encode_meta, encode_plan,
)

u32 = st.integers(0, 2**32 - 1)
u64 = st.integers(0, 2**64 - 1)
records = st.builds(MetaRecord, u32, st.sampled_from([PUT, GET]), u32, u64, u64, u32, u64,
                    u32, u32)


def test_record_layout_is_little_endian_fixed_width():
    rec = MetaRecord(3, GET, 7, 0x0102, 16, LOCAL_BIT | 2, 9, 0, 5)
    raw = rec.pack()
    assert len(raw) == RECORD_SIZE == 4 + 1 + (4 + 8 + 8) * 2 + 4 + 4
    assert raw[:5] == b"\x03\x00\x00\x00\x01"
    assert raw[5:9] == struct.pack("<I", 7)
    assert raw[9:17] == struct.pack("<Q", 0x0102)


@given(st.lists(records, max_size=20), u32)
def test_meta_round_trip(recs, n_global):
    assert decode_meta(encode_meta(recs, n_global)) == (n_global, recs)


@given(st.lists(st.tuples(u32, u64, u64), max_size=20), st.booleans(),
       st.lists(u64, min_size=6, max_size=6), u32, u32)
def test_plan_round_trip(entries, err, counts, mo, mi):
    header = PlanHeader(err, *counts, mo, mi)
    assert decode_plan(encode_plan(header, entries)) == (header, entries)


def test_frames_start_with_magic():
    assert encode_meta([], 0)[:4] == MAGIC_META
    assert encode_plan(PlanHeader(), [])[:4] == b"LPP1"


@pytest.mark.parametrize("mangle", [
    lambda f: f[:-1],
    lambda f: b"XXXX" + f[4:],
    lambda f: f + b"\0",
    lambda f: f[:5],
])
def test_corrupt_meta_rejected(mangle):
    frame = encode_meta([MetaRecord(0, PUT, 1, 2, 3, 4, 5, 0, 0)], 1)
    with pytest.raises(WireError):
        decode_meta(mangle(frame))


def test_bad_kind_rejected():
    raw = bytearray(encode_meta([MetaRecord(0, PUT, 1, 2, 3, 4, 5, 0, 0)], 1))
    raw[12 + 4] = 9
    with pytest.raises(WireError):
        decode_meta(bytes(raw))


def test_corrupt_plan_rejected():
    frame = encode_plan(PlanHeader(), [(1, 2, 3)])
    with pytest.raises(WireError):
        decode_plan(frame[:-2])
    with pytest.raises(WireError):
        decode_plan(encode_meta([], 0))
