"""Bit-exact encoding of on-disk records.

All integers are little-endian and fixed width; all checksums are CRC32C.
Every encoder returns a whole number of blocks so the output can be appended
to a zone directly.  The byte layouts are documented in ``docs/ondisk-format.md``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from crc32c import crc32c

FORMAT_VERSION = 1
OBJECT_ID_BYTES = 32
REPLICATED_SHARD = 0xFF

LMB_MAGIC = b"ZLMB"
DIGEST_MAGIC = b"ZDGT"
FOOTER_MAGIC = b"ZDFT"
SUPERBLOCK_MAGIC = b"ZSBK"


class LayoutError(Exception):
    pass


class BadMagic(LayoutError):
    pass


class BadChecksum(LayoutError):
    pass


class UnknownVersion(LayoutError):
    pass


class TruncatedRecord(LayoutError):
    pass


class RecordType(enum.IntEnum):
    SEGMENT = 1
    TOMBSTONE = 2


FLAG_COMPLETE = 0x01


def _pad(buf: bytes, block_size: int) -> bytes:
    rem = -len(buf) % block_size
    return buf + bytes(rem)


def round_up(n: int, block_size: int) -> int:
    return -(-n // block_size) * block_size


def _check_zero_tail(buf, start: int) -> None:
    tail = bytes(buf[start:])
    if tail.count(0) != len(tail):
        raise BadChecksum("non-zero bytes in record padding")


def object_id_from_hex(text: str) -> bytes:
    raw = bytes.fromhex(text)
    if len(raw) > OBJECT_ID_BYTES:
        raise ValueError("object id longer than 256 bits")
    return raw.rjust(OBJECT_ID_BYTES, b"\0")


# ---------------------------------------------------------------------------
# layout marker blocks

_LMB = struct.Struct("<4sBBBB32sQIQQQI")
_U32 = struct.Struct("<I")
LMB_HEADER_SIZE = _LMB.size + 4


@dataclass(frozen=True)
class LayoutMarkerBlock:
    record_type: RecordType
    object_id: bytes
    version: int
    segment_id: int = 0
    segment_length: int = 0
    fragment_length: int = 0
    complete: bool = False
    entry_timestamp: int = 0
    payload_checksum: int = 0
    shard_index: int = REPLICATED_SHARD

    def __post_init__(self):
        if len(self.object_id) != OBJECT_ID_BYTES:
            raise ValueError("object_id must be 32 bytes")
        if self.record_type == RecordType.TOMBSTONE and (self.segment_length or self.fragment_length):
            raise ValueError("tombstones carry no payload")


def encode_lmb(lmb: LayoutMarkerBlock, block_size: int) -> bytes:
    head = _LMB.pack(LMB_MAGIC, FORMAT_VERSION, int(lmb.record_type),
                     FLAG_COMPLETE if lmb.complete else 0, lmb.shard_index,
                     lmb.object_id, lmb.version, lmb.segment_id, lmb.segment_length,
                     lmb.fragment_length, lmb.entry_timestamp, lmb.payload_checksum)
    head += _U32.pack(crc32c(head))
    return _pad(head, block_size)


def decode_lmb(buf) -> LayoutMarkerBlock:
    if len(buf) < LMB_HEADER_SIZE:
        raise TruncatedRecord("buffer shorter than a layout marker header")
    if bytes(buf[:4]) != LMB_MAGIC:
        raise BadMagic("not a layout marker block")
    (crc,) = _U32.unpack_from(buf, _LMB.size)
    if crc32c(bytes(buf[:_LMB.size])) != crc:
        raise BadChecksum("layout marker header checksum mismatch")
    _check_zero_tail(buf, LMB_HEADER_SIZE)
    (_, version, rtype, flags, shard, oid, ver, seg, seg_len, frag_len, ts, pcrc) = \
        _LMB.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise UnknownVersion(f"layout marker version {version}")
    try:
        rtype = RecordType(rtype)
    except ValueError:
        raise UnknownVersion(f"unknown record type {rtype}") from None
    return LayoutMarkerBlock(rtype, oid, ver, seg, seg_len, frag_len, bool(flags & FLAG_COMPLETE),
                             ts, pcrc, shard)


# ---------------------------------------------------------------------------
# zone-set digests

_DIGEST_HEADER = struct.Struct("<4sBBHIQ")
_DIGEST_ENTRY = struct.Struct("<BBBx32sQIQQQQ")
_FOOTER = struct.Struct("<4sBxxxQQII")


@dataclass(frozen=True)
class DigestEntry:
    """Summary of one layout marker record plus its zone-set-relative offset."""

    record_type: RecordType
    object_id: bytes
    version: int
    segment_id: int
    complete: bool
    segment_length: int
    fragment_length: int
    entry_timestamp: int
    offset: int
    checksums: tuple = ()

    @classmethod
    def from_lmb(cls, lmb: LayoutMarkerBlock, offset: int, checksums=()) -> "DigestEntry":
        return cls(lmb.record_type, lmb.object_id, lmb.version, lmb.segment_id, lmb.complete,
                   lmb.segment_length, lmb.fragment_length, lmb.entry_timestamp, offset,
                   tuple(checksums))

    @property
    def is_segment(self) -> bool:
        return self.record_type == RecordType.SEGMENT


def digest_entry_size(n_checksums: int) -> int:
    return _DIGEST_ENTRY.size + 4 * n_checksums


@dataclass
class ZoneSetDigest:
    entries: list = field(default_factory=list)

    @property
    def entry_count(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class DigestFooter:
    digest_offset: int
    digest_length: int
    entry_count: int
    digest_checksum: int


def digest_body_size(entries_bytes: int) -> int:
    return _DIGEST_HEADER.size + entries_bytes + 4


def digest_size(entry_count: int, width: int, block_size: int) -> int:
    """Worst-case on-disk size of a digest (body plus footer block)."""
    return round_up(digest_body_size(entry_count * digest_entry_size(width)), block_size) + block_size


def _encode_digest_body(digest: ZoneSetDigest) -> bytes:
    parts = []
    for e in digest.entries:
        parts.append(_DIGEST_ENTRY.pack(int(e.record_type), FLAG_COMPLETE if e.complete else 0,
                                        len(e.checksums), e.object_id, e.version, e.segment_id,
                                        e.segment_length, e.fragment_length, e.entry_timestamp,
                                        e.offset))
        if e.checksums:
            parts.append(struct.pack(f"<{len(e.checksums)}I", *e.checksums))
    entries = b"".join(parts)
    body = _DIGEST_HEADER.pack(DIGEST_MAGIC, FORMAT_VERSION, 0, 0, len(digest.entries),
                               len(entries)) + entries
    return body + _U32.pack(crc32c(body))


def encode_digest(digest: ZoneSetDigest, block_size: int, offset: int = 0) -> bytes:
    """Digest body followed by a one-block footer locating it.

    ``offset`` is where the first byte will land within the zone set; the
    footer records it so recovery can find the digest from the last block.
    """
    raw = _encode_digest_body(digest)
    (checksum,) = _U32.unpack_from(raw, len(raw) - 4)
    body = _pad(raw, block_size)
    total = len(body) + block_size
    footer = _FOOTER.pack(FOOTER_MAGIC, FORMAT_VERSION, offset, total, digest.entry_count, checksum)
    footer += _U32.pack(crc32c(footer))
    return body + _pad(footer, block_size)


def decode_digest(buf, block_size: int | None = None) -> ZoneSetDigest:
    """Decode a digest body.

    With ``block_size`` the block padding must be zero and, when ``buf`` also
    holds the trailing footer block, the footer must agree with the body.
    """
    buf = memoryview(bytes(buf))
    if len(buf) < _DIGEST_HEADER.size:
        raise TruncatedRecord("buffer shorter than a digest header")
    magic, version, _, _, count, entries_len = _DIGEST_HEADER.unpack_from(buf)
    if magic != DIGEST_MAGIC:
        raise BadMagic("not a digest")
    end = _DIGEST_HEADER.size + entries_len
    if len(buf) < end + 4:
        raise TruncatedRecord("digest truncated")
    (crc,) = _U32.unpack_from(buf, end)
    if crc32c(buf[:end]) != crc:
        raise BadChecksum("digest checksum mismatch")
    if version != FORMAT_VERSION:
        raise UnknownVersion(f"digest version {version}")
    entries = []
    pos = _DIGEST_HEADER.size
    for _ in range(count):
        (rtype, flags, nck, oid, ver, seg, seg_len, frag_len, ts, off) = \
            _DIGEST_ENTRY.unpack_from(buf, pos)
        pos += _DIGEST_ENTRY.size
        cks = struct.unpack_from(f"<{nck}I", buf, pos) if nck else ()
        pos += 4 * nck
        entries.append(DigestEntry(RecordType(rtype), bytes(oid), ver, seg, bool(flags & FLAG_COMPLETE),
                                   seg_len, frag_len, ts, off, tuple(cks)))
    if pos != end:
        raise BadChecksum("digest entry table length mismatch")
    if block_size:
        body_end = round_up(end + 4, block_size)
        _check_zero_tail(buf[:body_end], end + 4)
        if len(buf) >= body_end + block_size:
            footer = decode_digest_footer(buf[body_end:body_end + block_size])
            if (footer.entry_count, footer.digest_checksum, footer.digest_length) != \
                    (count, crc, body_end + block_size):
                raise BadChecksum("digest footer does not match digest body")
    return ZoneSetDigest(entries)


def decode_digest_footer(block) -> DigestFooter:
    if len(block) < _FOOTER.size + 4:
        raise TruncatedRecord("buffer shorter than a digest footer")
    if bytes(block[:4]) != FOOTER_MAGIC:
        raise BadMagic("not a digest footer")
    (crc,) = _U32.unpack_from(block, _FOOTER.size)
    if crc32c(bytes(block[:_FOOTER.size])) != crc:
        raise BadChecksum("digest footer checksum mismatch")
    _check_zero_tail(block, _FOOTER.size + 4)
    _, version, off, length, count, dcrc = _FOOTER.unpack_from(block)
    if version != FORMAT_VERSION:
        raise UnknownVersion(f"digest footer version {version}")
    return DigestFooter(off, length, count, dcrc)


# ---------------------------------------------------------------------------
# superblocks

_SB_HEADER = struct.Struct("<4sBxxxIQQ")
_SB_FIXED = struct.Struct("<IHHHH")
_SB_DRIVE = struct.Struct("<HIQI16s")
_SB_ZONESET = struct.Struct("<IBBxxQQ")
_SB_MEMBER = struct.Struct("<HI")
_SB_SNAPSHOT = struct.Struct("<QQBxxxQIII")
_SB_EXTENT = struct.Struct("<IQQ")


@dataclass(frozen=True)
class DriveDescriptor:
    drive_id: int
    zone_count: int
    zone_capacity: int
    block_size: int
    uuid: bytes


@dataclass(frozen=True)
class ZoneSetRecord:
    zoneset_id: int
    state: int
    members: tuple
    dead_bytes: int = 0
    indexed_offset: int = 0


@dataclass(frozen=True)
class SnapshotLocation:
    snapshot_id: int
    created_at: int
    complete: bool
    length: int
    checksum: int
    extents: tuple = ()
    index_sets: tuple = ()


@dataclass(frozen=True)
class Superblock:
    sequence: int
    written_at: int
    block_size: int
    width: int
    superblock_zones: int
    superblock_replicas: int
    drives: tuple = ()
    zonesets: tuple = ()
    snapshots: tuple = ()


def encode_superblock(sb: Superblock) -> bytes:
    parts = [_SB_FIXED.pack(sb.block_size, sb.width, sb.superblock_zones,
                            sb.superblock_replicas, len(sb.drives))]
    for d in sb.drives:
        parts.append(_SB_DRIVE.pack(d.drive_id, d.zone_count, d.zone_capacity, d.block_size, d.uuid))
    parts.append(_U32.pack(len(sb.zonesets)))
    for z in sb.zonesets:
        parts.append(_SB_ZONESET.pack(z.zoneset_id, z.state, len(z.members), z.dead_bytes,
                                      z.indexed_offset))
        parts.extend(_SB_MEMBER.pack(d, zn) for d, zn in z.members)
    parts.append(bytes([len(sb.snapshots)]))
    for s in sb.snapshots:
        parts.append(_SB_SNAPSHOT.pack(s.snapshot_id, s.created_at, int(s.complete), s.length,
                                       s.checksum, len(s.extents), len(s.index_sets)))
        parts.extend(_SB_EXTENT.pack(*e) for e in s.extents)
        parts.extend(_U32.pack(i) for i in s.index_sets)
    body = b"".join(parts)
    total = _SB_HEADER.size + len(body) + 4
    rec = _SB_HEADER.pack(SUPERBLOCK_MAGIC, FORMAT_VERSION, total, sb.sequence, sb.written_at) + body
    rec += _U32.pack(crc32c(rec))
    return _pad(rec, sb.block_size)


def superblock_record_length(block) -> int:
    """Padded length of the superblock record whose first block is ``block``."""
    if len(block) < _SB_HEADER.size or bytes(block[:4]) != SUPERBLOCK_MAGIC:
        raise BadMagic("not a superblock")
    _, _, total, _, _ = _SB_HEADER.unpack_from(block)
    return round_up(total, len(block))


def decode_superblock(buf) -> Superblock:
    buf = memoryview(bytes(buf))
    if len(buf) < _SB_HEADER.size:
        raise TruncatedRecord("buffer shorter than a superblock header")
    magic, version, total, seq, written = _SB_HEADER.unpack_from(buf)
    if magic != SUPERBLOCK_MAGIC:
        raise BadMagic("not a superblock")
    if total < _SB_HEADER.size + 4 or len(buf) < total:
        raise TruncatedRecord("superblock truncated")
    (crc,) = _U32.unpack_from(buf, total - 4)
    if crc32c(buf[:total - 4]) != crc:
        raise BadChecksum("superblock checksum mismatch")
    _check_zero_tail(buf, total)
    if version != FORMAT_VERSION:
        raise UnknownVersion(f"superblock version {version}")
    pos = _SB_HEADER.size
    block_size, width, sb_zones, replicas, ndrives = _SB_FIXED.unpack_from(buf, pos)
    pos += _SB_FIXED.size
    drives = []
    for _ in range(ndrives):
        d = _SB_DRIVE.unpack_from(buf, pos)
        pos += _SB_DRIVE.size
        drives.append(DriveDescriptor(d[0], d[1], d[2], d[3], bytes(d[4])))
    (nsets,) = _U32.unpack_from(buf, pos)
    pos += 4
    zonesets = []
    for _ in range(nsets):
        zid, state, nmem, dead, idx_off = _SB_ZONESET.unpack_from(buf, pos)
        pos += _SB_ZONESET.size
        members = []
        for _ in range(nmem):
            members.append(_SB_MEMBER.unpack_from(buf, pos))
            pos += _SB_MEMBER.size
        zonesets.append(ZoneSetRecord(zid, state, tuple(members), dead, idx_off))
    nsnap = buf[pos]
    pos += 1
    snaps = []
    for _ in range(nsnap):
        sid, created, complete, length, cks, next_, nsets_ = _SB_SNAPSHOT.unpack_from(buf, pos)
        pos += _SB_SNAPSHOT.size
        extents = []
        for _ in range(next_):
            extents.append(_SB_EXTENT.unpack_from(buf, pos))
            pos += _SB_EXTENT.size
        sets = []
        for _ in range(nsets_):
            sets.append(_U32.unpack_from(buf, pos)[0])
            pos += 4
        snaps.append(SnapshotLocation(sid, created, bool(complete), length, cks, tuple(extents),
                                      tuple(sets)))
    if pos != total - 4:
        raise BadChecksum("superblock body length mismatch")
    return Superblock(seq, written, block_size, width, sb_zones, replicas, tuple(drives),
                      tuple(zonesets), tuple(snaps))


def select_newest(superblocks) -> Superblock | None:
    """Highest sequence wins; ``None`` when there is nothing to choose from."""
    return max(superblocks, key=lambda sb: sb.sequence, default=None)
