"""Zone sets: the table, their lifecycle, and the striped append path.

A zone set is one zone from each drive, written in lockstep.  Zone ``i`` of
every drive (after the superblock zones) forms zone set ``i``.  Segments are
split into ``width - 1`` equal block-aligned fragments plus one XOR parity
fragment; every zone receives a layout marker block followed by its fragment
at the same offset.
"""

from __future__ import annotations

import enum
import logging
import threading
import uuid
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field

from crc32c import crc32c

from .clock import LogicalClock
from .codec import CodecConfig, ShardSet, codec_for
from .layout import (REPLICATED_SHARD, DigestEntry, DriveDescriptor, LayoutError,
                     LayoutMarkerBlock, RecordType, Superblock, ZoneSetDigest, ZoneSetRecord,
                     decode_digest, decode_digest_footer, decode_lmb, decode_superblock,
                     digest_size, encode_digest, encode_lmb, encode_superblock, round_up,
                     superblock_record_length)
from .zbd import DriveArray, DriveFailed, ReadPastWritePointer

ZbdReadErrors = (DriveFailed, ReadPastWritePointer)

logger = logging.getLogger(__name__)

MiB = 1 << 20


class ZoneSetError(Exception):
    pass


class InsufficientZones(ZoneSetError):
    pass


class OutOfSpace(ZoneSetError):
    pass


class SegmentTooLarge(ZoneSetError):
    pass


class BadState(ZoneSetError):
    pass


class DonorConflict(ZoneSetError):
    pass


class DonorNotEmpty(ZoneSetError):
    pass


class TooManyFailures(ZoneSetError):
    pass


class ZoneSetState(enum.IntEnum):
    EMPTY = 0
    AVAILABLE = 1
    OPEN = 2
    CLOSED = 3
    INDEXED = 4
    INDEX = 5


_ALLOWED = {
    ZoneSetState.EMPTY: {ZoneSetState.AVAILABLE},
    ZoneSetState.AVAILABLE: {ZoneSetState.OPEN, ZoneSetState.INDEX},
    ZoneSetState.OPEN: {ZoneSetState.CLOSED},
    ZoneSetState.CLOSED: {ZoneSetState.INDEXED, ZoneSetState.EMPTY},
    ZoneSetState.INDEXED: {ZoneSetState.EMPTY},
    ZoneSetState.INDEX: {ZoneSetState.EMPTY},
}


class RWLock:
    """Shared/exclusive lock.  Shared acquisition is re-entrant per thread."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers: dict[int, int] = {}
        self._writer: int | None = None
        self._writer_depth = 0
        self._waiting_writers = 0

    def acquire_read(self) -> None:
        me = threading.get_ident()
        with self._cond:
            if self._writer == me or me in self._readers:
                self._readers[me] = self._readers.get(me, 0) + 1
                return
            while self._writer is not None or self._waiting_writers:
                self._cond.wait()
            self._readers[me] = 1

    def release_read(self) -> None:
        me = threading.get_ident()
        with self._cond:
            n = self._readers[me] - 1
            if n:
                self._readers[me] = n
            else:
                del self._readers[me]
                self._cond.notify_all()

    def acquire_write(self) -> None:
        me = threading.get_ident()
        with self._cond:
            if self._writer == me:
                self._writer_depth += 1
                return
            self._waiting_writers += 1
            try:
                while self._writer is not None or self._readers:
                    self._cond.wait()
            finally:
                self._waiting_writers -= 1
            self._writer = me
            self._writer_depth = 1

    def release_write(self) -> None:
        with self._cond:
            self._writer_depth -= 1
            if not self._writer_depth:
                self._writer = None
                self._cond.notify_all()

    @contextmanager
    def read(self):
        self.acquire_read()
        try:
            yield
        finally:
            self.release_read()

    @contextmanager
    def write(self):
        self.acquire_write()
        try:
            yield
        finally:
            self.release_write()


class WriteStats:
    """Bytes appended to the drives, by category."""

    def __init__(self):
        self.counts: Counter = Counter()
        self._lock = threading.Lock()

    def add(self, category: str, nbytes: int) -> None:
        with self._lock:
            self.counts[category] += nbytes

    def merge(self, counter: Counter) -> None:
        with self._lock:
            self.counts.update(counter)

    def total(self) -> int:
        return sum(self.counts.values())

    def parity(self) -> int:
        return sum(v for k, v in self.counts.items() if k.endswith("parity"))

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self.counts)


@dataclass(eq=False)
class ZoneSetDescriptor:
    zoneset_id: int
    members: list
    state: ZoneSetState = ZoneSetState.EMPTY
    write_offset: int = 0
    dead_bytes: int = 0
    pending_digest: list = field(default_factory=list)
    # bytes covered by the last committed index snapshot, and the dead bytes at that point
    indexed_offset: int = 0
    snapshot_dead: int = 0
    generation: int = 0
    # (offset, entry timestamp) of tombstones newer than the last snapshot; older ones are dead
    live_tombstones: list = field(default_factory=list)
    # OPEN after recovery with no writer: the digest must be rebuilt before appending
    digest_stale: bool = False
    # bytes of the closing digest across all members; None until known
    digest_bytes: int | None = None
    lock: RWLock = field(default_factory=RWLock, repr=False)

    @property
    def width(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class SegmentMeta:
    object_id: bytes
    version: int
    segment_id: int
    complete: bool
    entry_timestamp: int


@dataclass(frozen=True)
class SegmentLocation:
    zoneset_id: int
    offset: int
    length: int


class ZoneSetTable:
    def __init__(self, drives: DriveArray, width: int, superblock_zones: int = 2,
                 sets: dict | None = None):
        self.drives = drives
        self.width = width
        self.superblock_zones = superblock_zones
        self.sets: dict[int, ZoneSetDescriptor] = sets or {}
        self.lock = threading.RLock()
        self.stats = WriteStats()
        self.snapshots: list = []
        self.sb_writer: SuperblockWriter | None = None
        self.writers: dict[int, "ZoneSetWriter"] = {}
        self.codec = codec_for(CodecConfig(width - 1, 1))
        self.clock = LogicalClock()
        # geometry is fixed for the life of the table
        self.block_size = drives.block_size
        self.zone_capacity = drives.zone_capacity
        self.data_shards = width - 1

    def __getitem__(self, zoneset_id: int) -> ZoneSetDescriptor:
        return self.sets[zoneset_id]

    def __len__(self) -> int:
        return len(self.sets)

    def fragment_length(self, segment_length: int) -> int:
        return round_up(-(-segment_length // self.data_shards), self.block_size)

    def footprint(self, segment_length: int) -> int:
        """Bytes a segment of ``segment_length`` occupies across the whole set."""
        return self.width * (self.block_size + self.fragment_length(segment_length))

    def ids_in(self, *states) -> list[int]:
        with self.lock:
            return sorted(z for z, d in self.sets.items() if d.state in states)

    def count(self, *states) -> int:
        return len(self.ids_in(*states))

    def free_count(self) -> int:
        return self.count(ZoneSetState.EMPTY, ZoneSetState.AVAILABLE)

    def transition(self, zoneset_id: int, new: ZoneSetState) -> None:
        with self.lock:
            desc = self.sets[zoneset_id]
            if new not in _ALLOWED[desc.state]:
                raise BadState(f"zone set {zoneset_id}: {desc.state.name} -> {new.name} not allowed")
            desc.state = new

    def add_dead(self, zoneset_id: int, nbytes: int) -> None:
        with self.lock:
            self.sets[zoneset_id].dead_bytes += nbytes

    @property
    def tombstone_bytes(self) -> int:
        return self.width * self.block_size

    def expire_tombstones(self, horizon: int) -> int:
        """Count tombstones older than ``horizon`` as dead; return the bytes moved."""
        moved = 0
        with self.lock:
            for d in self.sets.values():
                keep = [t for t in d.live_tombstones if t[1] >= horizon]
                n = len(d.live_tombstones) - len(keep)
                if n:
                    d.live_tombstones = keep
                    d.dead_bytes += n * self.tombstone_bytes
                    moved += n * self.tombstone_bytes
        return moved

    def to_records(self) -> tuple:
        with self.lock:
            return tuple(ZoneSetRecord(d.zoneset_id, int(d.state), tuple(d.members), d.snapshot_dead,
                                       d.indexed_offset)
                         for d in sorted(self.sets.values(), key=lambda d: d.zoneset_id))

    def write_superblock(self) -> Superblock | None:
        if self.sb_writer is None:
            return None
        return self.sb_writer.write(self)

    def member_drives(self, desc: ZoneSetDescriptor) -> list:
        return [(i, self.drives[d], z) for i, (d, z) in enumerate(desc.members)]

    def live_members(self, desc: ZoneSetDescriptor) -> list:
        return [(i, drv, z) for i, drv, z in self.member_drives(desc) if not drv.failed]

    def write_pointers(self, desc: ZoneSetDescriptor) -> dict[int, int]:
        """Write pointers of the live members, keyed by member index."""
        return {i: drv.write_pointer(z) for i, drv, z in self.live_members(desc)}


def _as_array(drives) -> DriveArray:
    if isinstance(drives, DriveArray):
        return drives
    drives = list(drives)
    return DriveArray(drives[0].directory, {d.drive_id: d for d in drives}, drives[0].faults)


def init_table(drives, width: int, superblock_zones_per_drive: int = 2) -> ZoneSetTable:
    drives = _as_array(drives)
    if width != len(drives.drives):
        raise ValueError(f"zone-set width {width} must equal the drive count {len(drives.drives)}")
    if width < 2:
        raise ValueError("zone-set width must be at least 2")
    zone_count = drives.geometry.zone_count
    if zone_count < superblock_zones_per_drive + 1:
        raise InsufficientZones(f"{zone_count} zones per drive, need at least "
                                f"{superblock_zones_per_drive + 1}")
    ids = sorted(drives.drives)
    sets = {}
    for i in range(zone_count - superblock_zones_per_drive):
        zone = superblock_zones_per_drive + i
        sets[i] = ZoneSetDescriptor(i, [(d, zone) for d in ids])
    return ZoneSetTable(drives, width, superblock_zones_per_drive, sets)


def replenish_available(table: ZoneSetTable, target: int) -> list[int]:
    with table.lock:
        available = table.ids_in(ZoneSetState.AVAILABLE)
        empty = table.ids_in(ZoneSetState.EMPTY)
        if not available and not empty:
            raise OutOfSpace("no EMPTY or AVAILABLE zone sets")
        moved = empty[:max(0, target - len(available))]
        for z in moved:
            table.transition(z, ZoneSetState.AVAILABLE)
        if moved:
            table.write_superblock()
        return moved


def open_zoneset(table: ZoneSetTable, *, reserve: int = 0, pool_target: int = 8,
                 durable_acks: bool = False, fifo_bytes: int = 2 * MiB,
                 category_prefix: str = "") -> "ZoneSetWriter":
    """Open a writer on a free zone set.

    Resumable OPEN sets left by recovery are reused first.  ``reserve`` free
    sets are held back; only callers passing ``reserve=0`` may consume them.
    """
    with table.lock:
        for z in table.ids_in(ZoneSetState.OPEN):
            if z not in table.writers and table.sets[z].digest_stale and not category_prefix:
                return ZoneSetWriter.resume(table, table.sets[z], durable_acks=durable_acks,
                                            fifo_bytes=fifo_bytes)
        if table.free_count() <= reserve:
            raise OutOfSpace(f"{table.free_count()} free zone sets, {reserve} reserved")
        if not table.ids_in(ZoneSetState.AVAILABLE):
            replenish_available(table, pool_target)
        z = table.ids_in(ZoneSetState.AVAILABLE)[0]
        table.transition(z, ZoneSetState.OPEN)
        return ZoneSetWriter(table, table.sets[z], durable_acks=durable_acks,
                             fifo_bytes=fifo_bytes, category_prefix=category_prefix)


class ZoneSetWriter:
    """Exclusive append handle on one OPEN (or INDEX) zone set."""

    def __init__(self, table: ZoneSetTable, desc: ZoneSetDescriptor, *, durable_acks: bool = False,
                 fifo_bytes: int = 2 * MiB, category_prefix: str = ""):
        self.table = table
        self.desc = desc
        self.durable_acks = durable_acks
        self.fifo_bytes = fifo_bytes
        self.prefix = category_prefix
        self.lock = threading.RLock()
        self.closed = False
        width = desc.width
        self._buffers = [bytearray() for _ in range(width)]
        self._pending_stats = [Counter() for _ in range(width)]
        self._flushed = [desc.write_offset] * width
        self.failed = {i for i, (d, _) in enumerate(desc.members) if table.drives[d].failed}
        table.writers[desc.zoneset_id] = self

    @classmethod
    def resume(cls, table: ZoneSetTable, desc: ZoneSetDescriptor, **kw) -> "ZoneSetWriter":
        """Take over an OPEN set found by recovery, rebuilding its pending digest."""
        result = scan_records(table, desc, 0)
        desc.pending_digest = [r.digest_entry() for r in result.records]
        if result.end != desc.write_offset:
            raise BadState(f"zone set {desc.zoneset_id} is not resumable")
        desc.digest_stale = False
        return cls(table, desc, **kw)

    @property
    def zoneset_id(self) -> int:
        return self.desc.zoneset_id

    @property
    def write_offset(self) -> int:
        return self.desc.write_offset

    @property
    def flushed_offset(self) -> int:
        live = [f for i, f in enumerate(self._flushed) if i not in self.failed]
        return min(live) if live else 0

    def _avail(self, extra_entries: int = 1) -> int:
        d = self.desc
        return (self.table.zone_capacity - d.write_offset
                - digest_size(len(d.pending_digest) + extra_entries, d.width, self.table.block_size))

    def max_segment_payload(self) -> int:
        """Largest segment that still fits, or -1 if not even an empty one does."""
        bs = self.table.block_size
        room = self._avail() - bs
        if room < 0:
            return -1
        return room // bs * bs * self.table.data_shards

    def fits(self, segment_length: int) -> bool:
        return self.table.block_size + self.table.fragment_length(segment_length) <= self._avail()

    def _check_open(self) -> None:
        if self.closed or self.desc.state not in (ZoneSetState.OPEN, ZoneSetState.INDEX):
            raise BadState(f"zone set {self.zoneset_id} is not open for writing")

    def append_segment(self, meta: SegmentMeta, payload) -> SegmentLocation:
        table = self.table
        k = table.data_shards
        L = len(payload)
        P = table.fragment_length(L)
        view = memoryview(payload).cast("B") if L else memoryview(b"")
        frags = []
        for i in range(k):
            chunk = view[i * P:(i + 1) * P]
            if len(chunk) < P:
                chunk = bytes(chunk) + bytes(P - len(chunk))
            frags.append(chunk)
        frags.extend(table.codec.encode(frags) if P else [b""])
        return self.append_fragments(meta, L, frags)

    def append_fragments(self, meta: SegmentMeta, segment_length: int, frags,
                         checksums=None) -> SegmentLocation:
        """Append an already-encoded segment (one fragment per member)."""
        table = self.table
        bs = table.block_size
        P = table.fragment_length(segment_length)
        if any(len(f) != P for f in frags):
            raise ValueError("fragment length mismatch")
        if checksums is None:
            checksums = [crc32c(f) for f in frags]
        with self.lock:
            self._check_open()
            if not self.fits(segment_length):
                raise SegmentTooLarge(f"segment of {segment_length} bytes does not fit in zone set "
                                      f"{self.zoneset_id} at offset {self.write_offset}")
            offset = self.desc.write_offset
            width = self.desc.width
            lmb = None
            for i in range(width):
                lmb = LayoutMarkerBlock(RecordType.SEGMENT, meta.object_id, meta.version,
                                        meta.segment_id, segment_length, P, meta.complete,
                                        meta.entry_timestamp, checksums[i], i)
                parity = i >= table.data_shards
                self._buffers[i] += encode_lmb(lmb, bs)
                self._buffers[i] += frags[i]
                st = self._pending_stats[i]
                st[self.prefix + ("lmb_parity" if parity else "lmb")] += bs
                st[self.prefix + ("parity" if parity else "data")] += P
            self.desc.write_offset += bs + P
            self.desc.pending_digest.append(DigestEntry.from_lmb(lmb, offset, checksums))
            self._after_record()
            return SegmentLocation(self.zoneset_id, offset, segment_length)

    def append_tombstone(self, object_id: bytes, version: int, entry_timestamp: int) -> tuple[int, int]:
        bs = self.table.block_size
        lmb = LayoutMarkerBlock(RecordType.TOMBSTONE, object_id, version, complete=True,
                                entry_timestamp=entry_timestamp)
        block = encode_lmb(lmb, bs)
        with self.lock:
            self._check_open()
            if self._avail() < bs:
                raise SegmentTooLarge(f"no room for a tombstone in zone set {self.zoneset_id}")
            offset = self.desc.write_offset
            for i in range(self.desc.width):
                self._buffers[i] += block
                self._pending_stats[i][self.prefix + "tombstone"] += bs
            self.desc.write_offset += bs
            self.desc.pending_digest.append(DigestEntry.from_lmb(lmb, offset))
            with self.table.lock:
                self.desc.live_tombstones.append((offset, entry_timestamp))
            self._after_record()
            return self.zoneset_id, offset

    def has_room_for_tombstone(self) -> bool:
        return self._avail() >= self.table.block_size

    def _after_record(self) -> None:
        if self.durable_acks or any(len(b) >= self.fifo_bytes for b in self._buffers):
            self.flush()

    def flush(self) -> None:
        with self.lock:
            for i, (d, z) in enumerate(self.desc.members):
                buf = self._buffers[i]
                if not buf:
                    continue
                self._buffers[i] = bytearray()
                stats, self._pending_stats[i] = self._pending_stats[i], Counter()
                if i in self.failed:
                    continue
                try:
                    self.table.drives[d].append(z, buf)
                except DriveFailed:
                    self.failed.add(i)
                    logger.warning("zone set %d: drive %d failed, continuing degraded",
                                   self.zoneset_id, d)
                    if len(self.failed) > 1:
                        raise TooManyFailures(f"zone set {self.zoneset_id}: "
                                              f"{len(self.failed)} members failed")
                    continue
                self._flushed[i] += len(buf)
                self.table.stats.merge(stats)

    def flush_through(self, end: int) -> None:
        """Make bytes below ``end`` durable so they can be read back."""
        if self.flushed_offset < end:
            self.flush()

    def close(self) -> None:
        with self.lock:
            self._check_open()
            bs = self.table.block_size
            digest = encode_digest(ZoneSetDigest(list(self.desc.pending_digest)), bs,
                                   offset=self.desc.write_offset)
            assert self.desc.write_offset + len(digest) <= self.table.zone_capacity
            for i in range(self.desc.width):
                self._buffers[i] += digest
                self._pending_stats[i][self.prefix + "digest"] += len(digest)
            self.desc.write_offset += len(digest)
            self.desc.digest_bytes = len(digest) * self.desc.width
            self.flush()
            self.closed = True
            self.table.writers.pop(self.zoneset_id, None)
            if self.desc.state == ZoneSetState.OPEN:
                self.table.transition(self.zoneset_id, ZoneSetState.CLOSED)

    def detach(self) -> None:
        """Stop using this writer without closing the set (it stays OPEN)."""
        with self.lock:
            self.flush()
            self.closed = True
            self.table.writers.pop(self.zoneset_id, None)


def append_segment(writer: ZoneSetWriter, meta: SegmentMeta, payload) -> SegmentLocation:
    return writer.append_segment(meta, payload)


def append_tombstone(writer: ZoneSetWriter, object_id: bytes, version: int,
                     entry_timestamp: int = 0) -> tuple[int, int]:
    return writer.append_tombstone(object_id, version, entry_timestamp)


def close_zoneset(writer: ZoneSetWriter) -> None:
    writer.close()


def trim_zoneset(table: ZoneSetTable, zoneset_id: int, *, force: bool = False) -> None:
    """Reset every member zone; the set becomes EMPTY.  No superblock is written."""
    desc = table.sets[zoneset_id]
    if not force and desc.state not in (ZoneSetState.CLOSED, ZoneSetState.INDEXED, ZoneSetState.INDEX):
        raise BadState(f"cannot trim zone set {zoneset_id} in state {desc.state.name}")
    with desc.lock.write():
        for _, drv, z in table.live_members(desc):
            drv.reset(z)
        with table.lock:
            desc.state = ZoneSetState.EMPTY
            desc.write_offset = 0
            desc.dead_bytes = 0
            desc.indexed_offset = 0
            desc.snapshot_dead = 0
            desc.pending_digest = []
            desc.live_tombstones = []
            desc.digest_stale = False
            desc.digest_bytes = None
            desc.generation += 1


def replace_zone(table: ZoneSetTable, zoneset_id: int, failed_drive: int,
                 donor: tuple[int, int]) -> None:
    desc = table.sets[zoneset_id]
    donor_drive, donor_zone = donor
    with table.lock:
        if any(d == donor_drive for d, _ in desc.members):
            raise DonorConflict(f"drive {donor_drive} already holds a zone of set {zoneset_id}")
        if table.drives[donor_drive].write_pointer(donor_zone):
            raise DonorNotEmpty(f"donor zone {donor} is not empty")
        for other in table.sets.values():
            if tuple(donor) in [tuple(m) for m in other.members]:
                raise DonorConflict(f"donor zone {donor} belongs to zone set {other.zoneset_id}")
        idx = [i for i, (d, _) in enumerate(desc.members) if d == failed_drive]
        if not idx:
            raise ValueError(f"drive {failed_drive} is not a member of zone set {zoneset_id}")
        desc.members[idx[0]] = (donor_drive, donor_zone)


# ---------------------------------------------------------------------------
# reading records back

@dataclass(frozen=True)
class ScannedRecord:
    offset: int
    lmb: LayoutMarkerBlock
    checksums: tuple
    block_size: int

    @property
    def end(self) -> int:
        return self.offset + self.block_size + self.lmb.fragment_length

    def digest_entry(self) -> DigestEntry:
        return DigestEntry.from_lmb(self.lmb, self.offset,
                                    self.checksums if self.lmb.record_type == RecordType.SEGMENT else ())


@dataclass
class ScanResult:
    records: list
    end: int
    write_pointers: dict
    stop_reason: str = "write pointer"

    @property
    def torn(self) -> bool:
        return len(set(self.write_pointers.values())) > 1

    @property
    def max_wp(self) -> int:
        return max(self.write_pointers.values(), default=0)


def _same_record(a: LayoutMarkerBlock, b: LayoutMarkerBlock) -> bool:
    return (a.record_type, a.object_id, a.version, a.segment_id, a.segment_length,
            a.fragment_length, a.complete, a.entry_timestamp) == \
        (b.record_type, b.object_id, b.version, b.segment_id, b.segment_length,
         b.fragment_length, b.complete, b.entry_timestamp)


def scan_records(table: ZoneSetTable, desc: ZoneSetDescriptor, start: int = 0) -> ScanResult:
    """Walk layout marker blocks from ``start``.

    A record is accepted only when every live member holds a valid, matching
    marker for it and the record ends at or below the smallest write pointer.
    """
    bs = table.block_size
    live = table.live_members(desc)
    wps = {i: drv.write_pointer(z) for i, drv, z in live}
    limit = min(wps.values(), default=0)
    records = []
    off = start
    reason = "write pointer"
    while off + bs <= limit:
        lmbs = {}
        try:
            for i, drv, z in live:
                lmbs[i] = decode_lmb(drv.read(z, off, bs))
        except LayoutError as e:
            reason = type(e).__name__
            break
        first = next(iter(lmbs.values()))
        ok = all(_same_record(first, l) for l in lmbs.values())
        if first.record_type == RecordType.SEGMENT:
            ok = ok and all(l.shard_index == i for i, l in lmbs.items())
            ok = ok and first.fragment_length == table.fragment_length(first.segment_length)
        else:
            ok = ok and all(l.shard_index == REPLICATED_SHARD for l in lmbs.values())
        if not ok:
            reason = "inconsistent markers"
            break
        end = off + bs + first.fragment_length
        if end > limit:
            reason = "incomplete tail"
            break
        checksums = [0] * desc.width
        for i, l in lmbs.items():
            checksums[i] = l.payload_checksum
        records.append(ScannedRecord(off, first, tuple(checksums), bs))
        off = end
    return ScanResult(records, off, wps, reason)


def verify_record_payload(table: ZoneSetTable, desc: ZoneSetDescriptor, rec: ScannedRecord) -> bool:
    """Check every live fragment of ``rec`` against its marker checksum."""
    if rec.lmb.record_type != RecordType.SEGMENT:
        return True
    bs = table.block_size
    P = rec.lmb.fragment_length
    for i, drv, z in table.live_members(desc):
        if crc32c(drv.read(z, rec.offset + bs, P)) != rec.checksums[i]:
            return False
    return True


def read_digest(table: ZoneSetTable, desc: ZoneSetDescriptor, member: int | None = None):
    """Locate and decode the digest through the footer in the last block.

    The member drive is chosen round-robin by zone-set id.  Returns ``None``
    if the set has no valid digest at its write pointer.
    """
    bs = table.block_size
    live = table.live_members(desc)
    if not live:
        return None
    if member is None:
        i, drv, z = live[desc.zoneset_id % len(live)]
    else:
        i, drv, z = next(m for m in live if m[0] == member)
    wp = drv.write_pointer(z)
    if wp < 2 * bs:
        return None
    try:
        footer = decode_digest_footer(drv.read(z, wp - bs, bs))
        if footer.digest_offset + footer.digest_length != wp or footer.digest_offset % bs:
            return None
        body = drv.read(z, footer.digest_offset, footer.digest_length)
        return decode_digest(body, bs), footer
    except LayoutError:
        return None


# ---------------------------------------------------------------------------
# superblocks

def read_superblocks(drives: DriveArray, superblock_zones: int) -> list[tuple[Superblock, int, int]]:
    """Newest decodable superblock in each superblock zone: (sb, drive_id, zone)."""
    out = []
    bs = drives.block_size
    for d in drives.live_ids():
        drv = drives[d]
        for zone in range(superblock_zones):
            wp = drv.write_pointer(zone)
            if not wp:
                continue
            data = memoryview(drv.read(zone, 0, wp))
            offsets = []
            off = 0
            while off + bs <= wp:
                try:
                    length = superblock_record_length(data[off:off + bs])
                except LayoutError:
                    break
                if length <= 0 or off + length > wp:
                    break
                offsets.append((off, length))
                off += length
            for off, length in reversed(offsets):
                try:
                    out.append((decode_superblock(data[off:off + length]), d, zone))
                    break
                except LayoutError:
                    continue
    return out


class SuperblockWriter:
    """Appends replicated superblocks to the reserved zones of three drives."""

    def __init__(self, drives: DriveArray, superblock_zones: int = 2, replicas: int = 3,
                 sequence: int = 0, uuids: dict | None = None):
        self.drives = drives
        self.superblock_zones = superblock_zones
        self.replicas = replicas
        self.sequence = sequence
        self.uuids = dict(uuids or {})
        self._lock = threading.Lock()
        self.writes = 0

    def _uuid(self, drive_id: int) -> bytes:
        if drive_id not in self.uuids:
            self.uuids[drive_id] = uuid.uuid4().bytes
        return self.uuids[drive_id]

    def build(self, table: ZoneSetTable) -> Superblock:
        g = self.drives.geometry
        descs = tuple(DriveDescriptor(d, g.zone_count, g.zone_capacity, g.block_size, self._uuid(d))
                      for d in sorted(self.drives.drives))
        return Superblock(self.sequence, table.clock.now(), g.block_size, table.width,
                          self.superblock_zones, self.replicas, descs, table.to_records(),
                          tuple(table.snapshots))

    def _append(self, d: int, data: bytes) -> None:
        drv = self.drives[d]
        cap = self.drives.zone_capacity
        zones = range(self.superblock_zones)
        wps = {z: drv.write_pointer(z) for z in zones}
        zone = max(zones, key=lambda z: (wps[z], -z))
        if wps[zone] + len(data) > cap:
            candidates = [z for z in zones if z != zone]
            zone = min(candidates, key=lambda z: wps[z]) if candidates else zone
            drv.reset(zone)
        drv.append(zone, data)

    def write(self, table: ZoneSetTable) -> Superblock:
        with self._lock:
            self.sequence += 1
            sb = self.build(table)
            data = encode_superblock(sb)
            written = 0
            for d in self.drives.live_ids():
                if written == self.replicas:
                    break
                try:
                    self._append(d, data)
                except DriveFailed:
                    continue
                written += 1
                table.stats.add("superblock", len(data))
            if not written:
                raise TooManyFailures("no drive accepted the superblock")
            self.writes += 1
            return sb


# ---------------------------------------------------------------------------
# segment reads

class SegmentReadError(ZoneSetError):
    pass


class StaleLocation(SegmentReadError):
    """The location no longer holds the expected segment (relocated or trimmed)."""


def _identity(lmb: LayoutMarkerBlock) -> tuple:
    return lmb.object_id, lmb.version, lmb.segment_id, lmb.complete, lmb.entry_timestamp


def read_segment(table: ZoneSetTable, zoneset_id: int, offset: int, length: int,
                 expect: tuple | None = None) -> bytes:
    """Read one segment, reconstructing a single bad or missing shard from parity.

    ``expect`` is ``(object_id, version, segment_id, complete, entry_timestamp)``;
    a location whose markers disagree with it is reported as stale.
    """
    bs = table.block_size
    k = table.data_shards
    P = table.fragment_length(length)
    desc = table.sets[zoneset_id]
    writer = table.writers.get(zoneset_id)
    if writer is not None:
        writer.flush_through(offset + bs + P)
    frags: list = [None] * desc.width
    mismatched = 0

    def fetch(i: int) -> None:
        nonlocal mismatched
        d, z = desc.members[i]
        try:
            buf = table.drives[d].read(z, offset, bs + P)
            lmb = decode_lmb(buf[:bs])
        except (*ZbdReadErrors, LayoutError):
            return
        if expect is not None and _identity(lmb) != tuple(expect):
            mismatched += 1
            return
        if (lmb.record_type != RecordType.SEGMENT or lmb.shard_index != i
                or lmb.segment_length != length or lmb.fragment_length != P):
            mismatched += 1
            return
        frag = memoryview(buf)[bs:]
        if crc32c(frag) == lmb.payload_checksum:
            frags[i] = frag

    for i in range(k):
        fetch(i)
    bad = [i for i in range(k) if frags[i] is None]
    if bad and mismatched >= 2:
        raise StaleLocation(f"zone set {zoneset_id} offset {offset} no longer holds the segment")
    if len(bad) > 1:
        raise SegmentReadError(f"zone set {zoneset_id} offset {offset}: shards {bad} unreadable")
    if bad:
        fetch(k)
        if frags[k] is None:
            raise SegmentReadError(f"zone set {zoneset_id} offset {offset}: shard {bad[0]} and "
                                   f"parity unreadable")
        frags = table.codec.reconstruct(ShardSet([frags[i] if i != bad[0] else None
                                                  for i in range(desc.width)]))
    if k == 1:
        return bytes(frags[0][:length])
    return b"".join(frags[:k])[:length]


def read_shards(table: ZoneSetTable, desc: ZoneSetDescriptor, offset: int, length: int,
                checksums=None) -> list[bytes]:
    """All ``width`` fragments of a segment, for raw relocation or rebuild."""
    bs = table.block_size
    P = table.fragment_length(length)
    out: list = [None] * desc.width
    for i, (d, z) in enumerate(desc.members):
        try:
            frag = table.drives[d].read(z, offset + bs, P)
        except ZbdReadErrors:
            continue
        if checksums is None or crc32c(frag) == checksums[i]:
            out[i] = frag
    missing = [i for i, f in enumerate(out) if f is None]
    if len(missing) > 1:
        raise SegmentReadError(f"zone set {desc.zoneset_id} offset {offset}: shards {missing} unreadable")
    if missing:
        out = table.codec.reconstruct(ShardSet(out))
    return out


def set_entries(table: ZoneSetTable, desc: ZoneSetDescriptor):
    """Records of a set as digest entries: ``(entries, records_end, from_digest)``.

    The digest is authoritative when present; otherwise the markers are walked.
    """
    found = read_digest(table, desc)
    if found is not None:
        entries = list(found[0].entries)
        bs = table.block_size
        end = max((e.offset + bs + e.fragment_length for e in entries), default=0)
        return entries, end, True
    result = scan_records(table, desc, 0)
    return [r.digest_entry() for r in result.records], result.end, False
