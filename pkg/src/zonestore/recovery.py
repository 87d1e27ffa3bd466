"""Index recovery after a crash, drive-failure rebuild, and consistency checks.

Recovery reads the newest superblock, loads the last complete index snapshot
(flash copy if it validates, otherwise the copy in the INDEX zone sets), and
replays every record written after the snapshot.  A set only needs examining
when its write pointer has moved past the offset the snapshot covered.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field

from crc32c import crc32c

from .codec import ShardSet, TooManyMissing
from .gc import recompute_dead
from .index import (FlashIndex, IndexKey, IndexValue, ObjectIndex, SnapshotError, SnapshotManifest,
                    snapshot_load)
from .layout import (REPLICATED_SHARD, LayoutMarkerBlock, RecordType, SnapshotLocation, ZoneSetDigest, decode_lmb,
                     digest_size, encode_digest, encode_lmb)
from .zbd import DriveArray
from .zoneset import (SegmentReadError, SuperblockWriter, ZoneSetDescriptor, ZoneSetState,
                      ZoneSetTable, read_digest, read_segment, read_shards, read_superblocks,
                      replace_zone, scan_records, set_entries, verify_record_payload)

logger = logging.getLogger(__name__)


class RecoveryError(Exception):
    pass


class NoSuperblock(RecoveryError):
    pass


class UnrecoverableSnapshot(RecoveryError):
    pass


class DonorExhausted(RecoveryError):
    pass


@dataclass
class RecoveryReport:
    superblock_sequence: int = 0
    snapshot_source: str = "none"
    snapshot: SnapshotLocation | None = None
    zonesets_examined: int = 0
    segments_replayed: int = 0
    tombstones_processed: int = 0
    tails_truncated: int = 0
    sets_sealed: int = 0
    sets_trimmed: int = 0
    dangling_entries: int = 0
    negative_ledgers: int = 0
    wall_time: float = 0.0
    examined: list = field(default_factory=list)
    skipped: Counter = field(default_factory=Counter)

    def to_metrics(self) -> dict:
        return {
            "superblock_sequence": self.superblock_sequence,
            "snapshot_source": self.snapshot_source,
            "snapshot_id": self.snapshot.snapshot_id if self.snapshot else 0,
            "zonesets_examined": self.zonesets_examined,
            "segments_replayed": self.segments_replayed,
            "tombstones_processed": self.tombstones_processed,
            "records_skipped": sum(self.skipped.values()),
            "tails_truncated": self.tails_truncated,
            "sets_sealed": self.sets_sealed,
            "sets_trimmed": self.sets_trimmed,
            "dangling_entries": self.dangling_entries,
            "wall_time": round(self.wall_time, 6),
        }

    def to_text(self) -> str:
        lines = [f"{k}={v}" for k, v in self.to_metrics().items()]
        lines += [f"skipped.{reason}={n}" for reason, n in sorted(self.skipped.items())]
        return "\n".join(lines) + "\n"


class TombstoneSet(dict):
    """object_id -> highest deleted version seen during replay."""

    def note(self, object_id: bytes, version: int) -> None:
        if version > self.get(object_id, -1):
            self[object_id] = version


def find_latest_superblock(drives: DriveArray, superblock_zones: int = 2):
    found = read_superblocks(drives, superblock_zones)
    if not found:
        raise NoSuperblock("no valid superblock on any drive")
    return max(found, key=lambda t: t[0].sequence)[0]


def replay_record(record, index: ObjectIndex, tombstones: TombstoneSet, *,
                  zoneset_id: int = 0, offset: int | None = None, horizon: int = 0) -> str:
    """Apply one marker (or digest entry) to the index.

    Returns ``"applied"`` or ``"skipped:<reason>"``.
    """
    if offset is None:
        offset = record.offset
    if record.entry_timestamp < horizon:
        return "skipped:before-snapshot"
    oid = record.object_id
    if record.record_type == RecordType.TOMBSTONE:
        tombstones.note(oid, record.version)
        index.remove_where(oid, lambda k: k.version <= record.version)
        return "applied"
    if tombstones.get(oid, -1) >= record.version:
        return "skipped:deleted"
    latest = index.latest_complete_version(oid)
    if latest is not None and latest > record.version:
        return "skipped:superseded"
    key = IndexKey(oid, record.version, record.segment_id, record.complete)
    current = index.get(key)
    if current is not None and current.entry_timestamp > record.entry_timestamp:
        return "skipped:relocated"
    index.insert(key, IndexValue(zoneset_id, offset, record.segment_length, record.entry_timestamp))
    if record.complete:
        index.remove_where(oid, lambda k: k.version < record.version)
    return "applied"


def _table_from_superblock(drives: DriveArray, sb) -> ZoneSetTable:
    sets = {}
    for rec in sb.zonesets:
        sets[rec.zoneset_id] = ZoneSetDescriptor(
            rec.zoneset_id, [tuple(m) for m in rec.members], ZoneSetState(rec.state),
            dead_bytes=rec.dead_bytes, indexed_offset=rec.indexed_offset,
            snapshot_dead=rec.dead_bytes)
    table = ZoneSetTable(drives, sb.width, sb.superblock_zones, sets)
    table.sb_writer = SuperblockWriter(drives, sb.superblock_zones, sb.superblock_replicas,
                                       sequence=sb.sequence,
                                       uuids={d.drive_id: d.uuid for d in sb.drives})
    table.snapshots = [s for s in sb.snapshots if s.complete]
    return table


def _reset(table: ZoneSetTable, desc: ZoneSetDescriptor, state: ZoneSetState, read_only: bool) -> None:
    if not read_only:
        for _, drv, z in table.live_members(desc):
            if drv.write_pointer(z):
                drv.reset(z)
    desc.state = state
    desc.write_offset = 0
    desc.dead_bytes = desc.snapshot_dead = desc.indexed_offset = 0
    desc.digest_stale = False
    desc.pending_digest = []


def _seal(table: ZoneSetTable, desc: ZoneSetDescriptor, max_wp: int, records) -> int:
    """Pad a torn set to its highest write pointer and close it with a digest.

    ``records`` must come from a walk taken before padding: once padded, a
    record torn inside its last fragment could look whole.
    """
    bs = table.block_size
    for _, drv, z in table.live_members(desc):
        gap = max_wp - drv.write_pointer(z)
        if gap:
            drv.append(z, bytes(gap))
            table.stats.add("pad", gap)
    size = digest_size(len(records), desc.width, bs)
    if max_wp + size > table.zone_capacity:
        logger.warning("zone set %d: no room to seal with a digest", desc.zoneset_id)
        return max_wp
    digest = encode_digest(ZoneSetDigest([r.digest_entry() for r in records]), bs, offset=max_wp)
    for _, drv, z in table.live_members(desc):
        drv.append(z, digest)
        table.stats.add("digest", len(digest))
    return max_wp + len(digest)


def recover(drives: DriveArray, flash: FlashIndex | None, *, superblock_zones: int = 2,
            read_only: bool = False, order=None):
    """Rebuild the index and zone-set table; return ``(index, table, report)``.

    ``order`` optionally permutes the zone sets examined (replay is order
    independent).  With ``read_only`` nothing is written to the drives.
    """
    t0 = time.perf_counter()
    report = RecoveryReport()
    sb = find_latest_superblock(drives, superblock_zones)
    report.superblock_sequence = sb.sequence
    table = _table_from_superblock(drives, sb)
    bs = table.block_size

    complete = [s for s in sb.snapshots if s.complete]
    snap = max(complete, key=lambda s: s.snapshot_id, default=None)
    horizon = 0
    if snap is not None:
        manifest = SnapshotManifest.from_location(snap)
        try:
            index, source = snapshot_load(
                manifest, flash if not read_only else _ReadOnlyFlash(flash),
                read_extent=lambda z, off, length: read_segment(table, z, off, length))
        except (SnapshotError, SegmentReadError) as e:
            raise UnrecoverableSnapshot(f"snapshot {snap.snapshot_id}: {e}") from e
        report.snapshot_source = source
        report.snapshot = snap
        horizon = snap.created_at
        table.snapshots = [snap]
    else:
        index = ObjectIndex()
    keep_index_sets = set(snap.index_sets) if snap else set()

    snap_live: Counter = Counter()
    for _, v in index.items():
        snap_live[v.zoneset_id] += table.footprint(v.length)

    tombstones = TombstoneSet()
    scanned_fp: Counter = Counter()
    max_ts = max(sb.written_at, horizon)
    ids = list(order) if order is not None else sorted(table.sets)
    for z in ids:
        desc = table.sets[z]
        state = desc.state
        if state == ZoneSetState.INDEX:
            if z in keep_index_sets:
                desc.write_offset = max(table.write_pointers(desc).values(), default=0)
            else:
                _reset(table, desc, ZoneSetState.EMPTY, read_only)
                report.sets_trimmed += 1
            continue
        wps = table.write_pointers(desc)
        lo, hi = min(wps.values(), default=0), max(wps.values(), default=0)
        if state == ZoneSetState.EMPTY:
            if hi:
                _reset(table, desc, ZoneSetState.EMPTY, read_only)
                report.sets_trimmed += 1
            continue
        fresh = ZoneSetState.AVAILABLE if state in (ZoneSetState.AVAILABLE, ZoneSetState.OPEN) \
            else ZoneSetState.EMPTY
        if lo == 0:
            if hi:
                report.sets_trimmed += 1
            _reset(table, desc, fresh, read_only)
            continue
        start = desc.indexed_offset
        if lo == hi == start:
            desc.write_offset = hi
            if state in (ZoneSetState.OPEN, ZoneSetState.AVAILABLE):
                desc.state = ZoneSetState.OPEN
                desc.digest_stale = True
            continue
        if lo < start:
            logger.warning("zone set %d: write pointer %d below indexed offset %d", z, lo, start)
            start = desc.indexed_offset = desc.snapshot_dead = 0
        report.zonesets_examined += 1
        report.examined.append(z)

        found = read_digest(table, desc) if lo == hi else None
        if found is not None and found[1].digest_offset >= start:
            records = [e for e in found[0].entries if e.offset >= start]
            desc.state = ZoneSetState.INDEXED if state == ZoneSetState.INDEXED else ZoneSetState.CLOSED
            desc.write_offset = hi
        else:
            result = scan_records(table, desc, start)
            records = result.records
            if result.torn and records and not verify_record_payload(table, desc, records[-1]):
                records.pop()
            if result.torn or result.end < hi:
                report.tails_truncated += 1
                desc.state = ZoneSetState.CLOSED
                if not read_only:
                    valid_end = records[-1].end if records else start
                    prefix = scan_records(table, desc, 0).records if start else records
                    prefix = [r for r in prefix if r.end <= valid_end]
                    desc.write_offset = _seal(table, desc, hi, prefix)
                    report.sets_sealed += 1
                else:
                    desc.write_offset = hi
            else:
                desc.state = ZoneSetState.OPEN if state != ZoneSetState.CLOSED else ZoneSetState.CLOSED
                desc.digest_stale = desc.state == ZoneSetState.OPEN
                desc.write_offset = hi
            records = [r.digest_entry() for r in records]

        for rec in records:
            max_ts = max(max_ts, rec.entry_timestamp, rec.version)
            if rec.record_type == RecordType.SEGMENT:
                scanned_fp[z] += table.footprint(rec.segment_length)
                report.segments_replayed += 1
            else:
                report.tombstones_processed += 1
                if rec.entry_timestamp < horizon:
                    scanned_fp[z] += table.tombstone_bytes
                else:
                    desc.live_tombstones.append((rec.offset, rec.entry_timestamp))
            outcome = replay_record(rec, index, tombstones, zoneset_id=z, horizon=horizon)
            if outcome != "applied":
                report.skipped[outcome.split(":", 1)[1]] += 1

    # only the newest complete version of each object survives
    for oid in index.object_ids():
        latest = index.latest_complete_version(oid)
        index.remove_where(oid, lambda k: k.version != latest)

    # no entry may point at bytes the drives do not hold
    for key, value in list(index.items()):
        desc = table.sets.get(value.zoneset_id)
        end = value.offset + bs + table.fragment_length(value.length)
        if desc is None or desc.state in (ZoneSetState.EMPTY, ZoneSetState.AVAILABLE,
                                          ZoneSetState.INDEX) or end > desc.write_offset:
            index.remove(key)
            report.dangling_entries += 1
            logger.error("dropping dangling index entry %s -> %s", key, value)

    live: Counter = Counter()
    for _, v in index.items():
        live[v.zoneset_id] += table.footprint(v.length)
        max_ts = max(max_ts, v.entry_timestamp)
    for z, desc in table.sets.items():
        if desc.state in (ZoneSetState.EMPTY, ZoneSetState.AVAILABLE, ZoneSetState.INDEX):
            desc.dead_bytes = desc.snapshot_dead = 0
            continue
        base = desc.snapshot_dead + snap_live[z] if desc.indexed_offset else 0
        dead = base + scanned_fp[z] - live[z]
        if dead < 0:
            report.negative_ledgers += 1
            logger.error("zone set %d: recovered dead bytes %d < 0", z, dead)
            dead = 0
        desc.dead_bytes = dead

    table.clock.advance_to(max_ts)
    if not read_only:
        table.write_superblock()
    report.wall_time = time.perf_counter() - t0
    logger.info("recovered %d entries; examined %d zone sets", len(index), report.zonesets_examined)
    return index, table, report


class _ReadOnlyFlash:
    """Flash view that never writes (used when recovering read-only)."""

    def __init__(self, flash: FlashIndex | None):
        self._flash = flash

    def read_snapshot(self, snapshot_id: int):
        return self._flash.read_snapshot(snapshot_id) if self._flash is not None else None

    def write_snapshot(self, snapshot_id: int, data: bytes) -> None:
        pass


# ---------------------------------------------------------------------------
# drive failure

@dataclass
class RebuildReport:
    failed_drive: int
    spare_drive: int
    sets_rebuilt: int = 0
    sets_remapped: int = 0
    bytes_written: int = 0
    wall_time: float = 0.0

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.__dict__.items())


def _rebuild_set(table: ZoneSetTable, desc: ZoneSetDescriptor, slot: int, entries, end: int,
                 wp: int, donor) -> int:
    bs = table.block_size
    drv_s, z_s = next((drv, z) for i, drv, z in table.live_members(desc) if i != slot)
    out = bytearray()
    written = 0

    def spill(force: bool = False) -> None:
        nonlocal out, written
        if out and (force or len(out) >= (8 << 20)):
            donor[0].append(donor[1], out)
            table.stats.add("rebuild", len(out))
            written += len(out)
            out = bytearray()

    for e in entries:
        if e.record_type == RecordType.SEGMENT:
            checksums = e.checksums if len(e.checksums) == desc.width else None
            frag = read_shards(table, desc, e.offset, e.segment_length, checksums)[slot]
            out += encode_lmb(LayoutMarkerBlock(e.record_type, e.object_id, e.version,
                                                e.segment_id, e.segment_length,
                                                e.fragment_length, e.complete,
                                                e.entry_timestamp, crc32c(frag), slot), bs)
            out += frag
        else:
            out += drv_s.read(z_s, e.offset, bs)
        spill()
    if wp > end:
        out += drv_s.read(z_s, end, wp - end)
    spill(force=True)
    return written


def rebuild_after_drive_failure(store, failed_drive: int, spare_drive: int | None = None) -> RebuildReport:
    """Move every zone of ``failed_drive`` onto ``spare_drive``, reconstructing contents.

    Zone-set width equals the drive count, so donors come from a spare drive
    (attach one with ``DriveArray.add_drive``).
    """
    t0 = time.perf_counter()
    table: ZoneSetTable = store.table
    drives = table.drives
    failed = drives.faults.failed
    if len(failed & {d for d in drives.drives}) > 1 or \
            any(len({d for d, _ in s.members} & failed) > 1 for s in table.sets.values()):
        raise TooManyMissing(f"drives {sorted(failed)} failed; RAID-4 tolerates one")
    if spare_drive is None:
        raise DonorExhausted("no spare drive attached; every drive already holds a zone of each set")
    if spare_drive in failed or spare_drive not in drives.drives:
        raise DonorExhausted(f"spare drive {spare_drive} is not usable")
    report = RebuildReport(failed_drive, spare_drive)
    store.gc.stop()
    with store.gate.write():
        for w in store.all_writers():
            w.close()
        store._idle.clear()
        store.gc.writer = None
        for z in sorted(table.sets):
            desc = table.sets[z]
            slots = [i for i, (d, _) in enumerate(desc.members) if d == failed_drive]
            if not slots:
                continue
            slot = slots[0]
            zone = desc.members[slot][1]
            with desc.lock.write():
                wps = table.write_pointers(desc)
                wp = max(wps.values(), default=0)
                entries, end = [], 0
                if wp:
                    entries, end, _ = set_entries(table, desc)
                replace_zone(table, z, failed_drive, (spare_drive, zone))
                if wp:
                    report.bytes_written += _rebuild_set(table, desc, slot, entries, end, wp,
                                                         (drives[spare_drive], zone))
                    report.sets_rebuilt += 1
                else:
                    report.sets_remapped += 1
        table.write_superblock()
    report.wall_time = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# consistency check

@dataclass
class FsckReport:
    problems: list = field(default_factory=list)
    entries_checked: int = 0
    sets_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.problems

    def to_text(self) -> str:
        lines = [f"entries_checked={self.entries_checked}", f"sets_checked={self.sets_checked}",
                 f"inconsistencies={len(self.problems)}"]
        return "\n".join(lines + [f"problem: {p}" for p in self.problems]) + "\n"


def _marker_problems(table: ZoneSetTable, desc: ZoneSetDescriptor, e) -> list[str]:
    problems = []
    bs = table.block_size
    for i, drv, z in table.live_members(desc):
        try:
            lmb = decode_lmb(drv.read(z, e.offset, bs))
        except Exception as err:  # noqa: BLE001 - any failure is an inconsistency
            problems.append(f"set {desc.zoneset_id} offset {e.offset} member {i}: {err}")
            continue
        shard = i if e.record_type == RecordType.SEGMENT else REPLICATED_SHARD
        if (lmb.record_type, lmb.object_id, lmb.version, lmb.segment_id, lmb.complete,
                lmb.segment_length, lmb.entry_timestamp, lmb.shard_index) != \
                (e.record_type, e.object_id, e.version, e.segment_id, e.complete,
                 e.segment_length, e.entry_timestamp, shard):
            problems.append(f"set {desc.zoneset_id} offset {e.offset} member {i}: "
                            f"marker disagrees with the digest")
    return problems


def fsck(store, *, verify_payloads: bool = True) -> FsckReport:
    """Compare the index against the markers on disk and the parity of every stripe."""
    table: ZoneSetTable = store.table
    report = FsckReport()
    store.flush()
    found: dict[tuple, object] = {}
    for z, desc in sorted(table.sets.items()):
        if desc.state in (ZoneSetState.EMPTY, ZoneSetState.AVAILABLE):
            continue
        report.sets_checked += 1
        members = [d for d, _ in desc.members]
        if len(set(members)) != len(members):
            report.problems.append(f"set {z}: members share a drive")
        dead = [d for d in members if d in table.drives.faults.failed]
        if dead:
            report.problems.append(f"set {z}: member drives {dead} failed")
        wps = table.write_pointers(desc)
        if len(set(wps.values())) > 1:
            report.problems.append(f"set {z}: write pointers differ {wps}")
        if desc.state == ZoneSetState.INDEX:
            continue
        entries, _, from_digest = set_entries(table, desc)
        if not from_digest and desc.state in (ZoneSetState.CLOSED, ZoneSetState.INDEXED):
            report.problems.append(f"set {z}: closed without a readable digest")
        for e in entries:
            if from_digest:
                report.problems.extend(_marker_problems(table, desc, e))
            if e.record_type == RecordType.SEGMENT:
                found[(z, e.offset)] = e
    for key, value in store.index.items():
        report.entries_checked += 1
        e = found.get((value.zoneset_id, value.offset))
        if e is None or (e.object_id, e.version, e.segment_id, e.complete, e.segment_length,
                         e.entry_timestamp) != (key.object_id, key.version, key.segment_id,
                                                key.complete, value.length, value.entry_timestamp):
            report.problems.append(f"index entry {key} -> {value} has no matching marker")
            continue
        if verify_payloads:
            desc = table.sets[value.zoneset_id]
            P = table.fragment_length(value.length)
            frags = []
            for i, drv, zn in table.member_drives(desc):
                try:
                    buf = drv.read(zn, value.offset, table.block_size + P)
                    lmb = decode_lmb(buf[:table.block_size])
                except Exception as err:  # noqa: BLE001 - any failure is an inconsistency
                    report.problems.append(f"{key}: shard {i} unreadable ({err})")
                    break
                frag = buf[table.block_size:]
                if crc32c(frag) != lmb.payload_checksum:
                    report.problems.append(f"{key}: shard {i} checksum mismatch")
                frags.append(frag)
            else:
                if not table.codec.verify(ShardSet(frags)):
                    report.problems.append(f"{key}: parity mismatch")
    for z, scanned in recompute_dead(store).items():
        if table.sets[z].dead_bytes != scanned:
            report.problems.append(f"set {z}: dead-space ledger {table.sets[z].dead_bytes} "
                                   f"!= scan {scanned}")
    return report
