import pytest
from hypothesis import given, settings, strategies as st

from zonestore.layout import (BadChecksum, BadMagic, DigestEntry, DriveDescriptor, LayoutError,
                              LayoutMarkerBlock, RecordType, SnapshotLocation, Superblock,
                              ZoneSetDigest, ZoneSetRecord, decode_digest, decode_digest_footer,
                              decode_lmb, decode_superblock, encode_digest, encode_lmb,
                              encode_superblock, select_newest)

BS = 4096
u8 = st.integers(0, 255)
u16 = st.integers(0, 2**16 - 1)
u32 = st.integers(0, 2**32 - 1)
u64 = st.integers(0, 2**64 - 1)
oids = st.binary(min_size=32, max_size=32)


@st.composite
def lmbs(draw):
    tomb = draw(st.booleans())
    return LayoutMarkerBlock(
        RecordType.TOMBSTONE if tomb else RecordType.SEGMENT, draw(oids), draw(u64), draw(u32),
        0 if tomb else draw(u64), 0 if tomb else draw(u64), draw(st.booleans()), draw(u64),
        draw(u32), draw(st.integers(0, 0xFF)))


@st.composite
def digest_entries(draw):
    tomb = draw(st.booleans())
    return DigestEntry(
        RecordType.TOMBSTONE if tomb else RecordType.SEGMENT, draw(oids), draw(u64), draw(u32),
        draw(st.booleans()), draw(u64), draw(u64), draw(u64), draw(u64),
        () if tomb else tuple(draw(st.lists(u32, min_size=1, max_size=8))))


@st.composite
def superblocks(draw, max_sets=20):
    width = draw(st.integers(1, 8))
    drives = tuple(DriveDescriptor(d, draw(u32), draw(u64), 4096, draw(st.binary(min_size=16, max_size=16)))
                   for d in range(width))
    sets = tuple(ZoneSetRecord(i, draw(st.integers(0, 5)),
                               tuple((d, draw(u32)) for d in range(width)), draw(u64), draw(u64))
                 for i in range(draw(st.integers(0, max_sets))))
    snaps = tuple(SnapshotLocation(draw(u64), draw(u64), draw(st.booleans()), draw(u64), draw(u32),
                                   tuple(draw(st.lists(st.tuples(u32, u64, u64), max_size=3))),
                                   tuple(draw(st.lists(u32, max_size=3))))
                  for _ in range(draw(st.integers(0, 2))))
    return Superblock(draw(u64), draw(u64), BS, width, 2, 3, drives, sets, snaps)


def sample_lmb():
    return LayoutMarkerBlock(RecordType.SEGMENT, bytes(range(32)), 17, 2, 10 << 20, 2 << 20, True,
                             123456, 0xDEADBEEF, 3)


def test_lmb_is_one_block_and_round_trips():
    raw = encode_lmb(sample_lmb(), BS)
    assert len(raw) == BS
    assert decode_lmb(raw) == sample_lmb()


def test_lmb_guards():
    with pytest.raises(BadMagic):
        decode_lmb(bytes(BS))
    raw = bytearray(encode_lmb(sample_lmb(), BS))
    raw[20] ^= 1
    with pytest.raises(BadChecksum):
        decode_lmb(bytes(raw))
    with pytest.raises(ValueError):
        LayoutMarkerBlock(RecordType.TOMBSTONE, bytes(32), 1, segment_length=5)


def test_empty_digest_round_trip():
    raw = encode_digest(ZoneSetDigest([]), BS)
    assert len(raw) == 2 * BS
    assert decode_digest(raw, BS) == ZoneSetDigest([])
    footer = decode_digest_footer(raw[-BS:])
    assert (footer.entry_count, footer.digest_length) == (0, 2 * BS)


def test_superblock_with_384_sets_round_trips():
    sets = tuple(ZoneSetRecord(i, i % 6, tuple((d, i + 2) for d in range(6)), i * 4096, i * 8192)
                 for i in range(384))
    drives = tuple(DriveDescriptor(d, 386, 8 << 20, BS, bytes([d]) * 16) for d in range(6))
    sb = Superblock(9, 1000, BS, 6, 2, 3, drives, sets, ())
    raw = encode_superblock(sb)
    assert len(raw) % BS == 0
    assert decode_superblock(raw) == sb


def test_newest_superblock_wins():
    a = Superblock(3, 0, BS, 1, 2, 3)
    b = Superblock(7, 0, BS, 1, 2, 3)
    got = [decode_superblock(encode_superblock(x)) for x in (a, b)]
    assert select_newest(got).sequence == 7
    assert select_newest([]) is None


@settings(max_examples=150)
@given(lmbs(), st.sampled_from([512, 4096]))
def test_lmb_round_trip_property(lmb, bs):
    raw = encode_lmb(lmb, bs)
    assert len(raw) % bs == 0
    assert decode_lmb(raw) == lmb


@settings(max_examples=100)
@given(st.lists(digest_entries(), max_size=12), st.sampled_from([512, 4096]), u64)
def test_digest_round_trip_property(entries, bs, offset):
    raw = encode_digest(ZoneSetDigest(entries), bs, offset)
    assert len(raw) % bs == 0
    assert decode_digest(raw, bs).entries == entries
    assert decode_digest_footer(raw[-bs:]).digest_offset == offset


@settings(max_examples=60)
@given(superblocks())
def test_superblock_round_trip_property(sb):
    raw = encode_superblock(sb)
    assert len(raw) % BS == 0
    assert decode_superblock(raw) == sb


def _corrupt(raw: bytes, pos: int, bits: int) -> bytes:
    buf = bytearray(raw)
    buf[pos] ^= bits
    return bytes(buf)


@settings(max_examples=200)
@given(lmbs(), st.integers(0, BS - 1), st.integers(1, 255))
def test_any_byte_corruption_detected_lmb(lmb, pos, bits):
    with pytest.raises(LayoutError):
        decode_lmb(_corrupt(encode_lmb(lmb, BS), pos, bits))


@settings(max_examples=150)
@given(st.lists(digest_entries(), max_size=6), st.data(), st.integers(1, 255))
def test_any_byte_corruption_detected_digest(entries, data, bits):
    raw = encode_digest(ZoneSetDigest(entries), 512)
    pos = data.draw(st.integers(0, len(raw) - 1))
    bad = _corrupt(raw, pos, bits)
    with pytest.raises(LayoutError):
        decode_digest(bad, 512)
        decode_digest_footer(bad[-512:])


@settings(max_examples=100)
@given(superblocks(max_sets=4), st.data(), st.integers(1, 255))
def test_any_byte_corruption_detected_superblock(sb, data, bits):
    raw = encode_superblock(sb)
    pos = data.draw(st.integers(0, len(raw) - 1))
    with pytest.raises(LayoutError):
        decode_superblock(_corrupt(raw, pos, bits))
