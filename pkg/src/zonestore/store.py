"""Client operations: PUT, GET, DELETE and STAT, plus index snapshots.

Objects are split into segments as they stream in.  Each segment goes to an
open zone set and is indexed immediately; the final segment carries the
complete bit.  Only once the complete segment is durable are older versions
removed from the index.
"""

from __future__ import annotations

import io
import logging
import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .clock import LogicalClock
from .index import (FlashIndex, IndexKey, IndexValue, ObjectIndex, SnapshotManifest,
                    encode_snapshot, snapshot_checksum)
from .layout import OBJECT_ID_BYTES, SnapshotLocation, object_id_from_hex
from .zbd import DriveArray, FaultInjector
from .zoneset import (MiB, OutOfSpace, RWLock, SegmentMeta, SegmentReadError,
                      StaleLocation, SuperblockWriter, ZoneSetState, ZoneSetTable, ZoneSetWriter,
                      init_table, open_zoneset, read_segment, replenish_available, trim_zoneset)

logger = logging.getLogger(__name__)

CONFIG_NAME = "store.conf"
SNAPSHOT_OBJECT = bytes(OBJECT_ID_BYTES)

_SUFFIXES = {"k": 1 << 10, "kib": 1 << 10, "m": 1 << 20, "mib": 1 << 20, "g": 1 << 30, "gib": 1 << 30,
             "kb": 1000, "mb": 1000 ** 2, "gb": 1000 ** 3, "b": 1}


def parse_size(text) -> int:
    """``"8MiB"`` -> 8388608.  Plain integers pass through."""
    if isinstance(text, int):
        return text
    s = str(text).strip().lower().replace("_", "")
    for suffix in sorted(_SUFFIXES, key=len, reverse=True):
        if s.endswith(suffix) and s[:-len(suffix)].strip():
            return int(float(s[:-len(suffix)]) * _SUFFIXES[suffix])
    return int(s)


class StoreError(Exception):
    pass


class NotFound(StoreError):
    pass


class ReadError(StoreError):
    pass


@dataclass
class StoreConfig:
    drives: int = 6
    zones: int = 64
    zone_size: int = 8 * MiB
    block_size: int = 4096
    width: int = 6
    superblock_zones: int = 2
    superblock_replicas: int = 3
    segment_size: int = 20 * MiB
    # a set is closed once it cannot take a segment of this size
    min_segment: int = 1 * MiB
    segments_per_turn: int = 12
    durable_acks: bool = False
    fifo_bytes: int = 2 * MiB
    pool_target: int = 8
    gc_reserve: int = 1
    gc_low_watermark: int = 2
    gc_idle_interval: float = 0.05
    snapshot_every_bytes: int = 0
    # also snapshot once tombstones awaiting expiry reach this fraction of capacity
    snapshot_tombstone_fraction: float = 0.01
    flash_persist_ops: int = 1000
    debug: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and not isinstance(v, int):
                setattr(self, f.name, parse_size(v))
            elif f.type in ("bool", bool) and isinstance(v, str):
                setattr(self, f.name, v.strip().lower() in ("1", "true", "yes", "on"))
            elif f.type in ("float", float):
                setattr(self, f.name, float(v))
        if self.width != self.drives:
            raise ValueError("zone-set width must equal the number of drives")
        if self.segment_size <= 0 or self.min_segment <= 0:
            raise ValueError("segment sizes must be positive")

    @property
    def zoneset_count(self) -> int:
        return self.zones - self.superblock_zones

    @property
    def capacity(self) -> int:
        """Raw bytes in all zone sets."""
        return self.zoneset_count * self.width * self.zone_size

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "StoreConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = value.strip()
        return cls(**values)


def normalize_object_id(object_id) -> bytes:
    if isinstance(object_id, str):
        return object_id_from_hex(object_id)
    object_id = bytes(object_id)
    if len(object_id) != OBJECT_ID_BYTES:
        raise ValueError("object ids are 32 bytes")
    return object_id


@dataclass(frozen=True)
class ObjectStat:
    object_id: bytes
    version: int
    length: int
    segments: int


@dataclass
class PutContext:
    object_id: bytes
    version: int
    segments_written: int = 0
    writer: ZoneSetWriter | None = None


class _Source:
    """Byte source with enough lookahead to know which segment is the last."""

    def __init__(self, data):
        if isinstance(data, (bytes, bytearray, memoryview)):
            self._view = memoryview(data).cast("B")
            self._file = None
        else:
            self._view = memoryview(b"")
            self._file = data
        self._pos = 0
        self.total = 0

    def fill(self, n: int) -> int:
        """Buffer at least ``n + 1`` bytes if the stream has them; return min(n, buffered)."""
        if self._file is not None and len(self._view) - self._pos <= n:
            rest = bytes(self._view[self._pos:])
            chunks = [rest]
            have = len(rest)
            while have <= n:
                chunk = self._file.read(max(n + 1 - have, 1 << 16))
                if not chunk:
                    self._file = None
                    break
                chunks.append(chunk)
                have += len(chunk)
            self._view = memoryview(b"".join(chunks))
            self._pos = 0
        return min(n, len(self._view) - self._pos)

    def take(self, n: int) -> memoryview:
        out = self._view[self._pos:self._pos + n]
        self._pos += n
        self.total += n
        return out

    @property
    def exhausted(self) -> bool:
        return self._file is None and self._pos >= len(self._view)


class Store:
    def __init__(self, root, config: StoreConfig, table: ZoneSetTable, index: ObjectIndex,
                 flash: FlashIndex, *, last_snapshot: SnapshotLocation | None = None,
                 recovery_report=None, read_only: bool = False):
        self.root = Path(root) if root is not None else None
        self.config = config
        self.table = table
        self.index = index
        self.flash = flash
        self.clock: LogicalClock = table.clock
        self.gate = RWLock()
        self.read_only = read_only
        self.recovery_report = recovery_report
        self.last_snapshot = last_snapshot
        self.deleted_upto: dict[bytes, int] = {}
        self._idle: list[ZoneSetWriter] = []
        self._writers_lock = threading.Lock()
        self._snapshot_lock = threading.Lock()
        self._ops_since_flash = 0
        self._flash_threshold = config.flash_persist_ops
        self._ingest_since_snapshot = 0
        self._tombstones_since_snapshot = 0
        self.bytes_ingested = 0
        self.op_counts = {"put": 0, "get": 0, "delete": 0}
        self.closed = False
        self.snapshot_quiesce_seconds: list[float] = []
        from .gc import GarbageCollector, GcPolicy
        self.gc = GarbageCollector(self, GcPolicy(low_watermark=config.gc_low_watermark,
                                                  idle_interval=config.gc_idle_interval))

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, root, config: StoreConfig | None = None,
               faults: FaultInjector | None = None) -> "Store":
        config = config or StoreConfig()
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        if (root / CONFIG_NAME).exists():
            raise FileExistsError(f"{root} already holds a store")
        drives = DriveArray.create(root / "drives", config.drives, config.zones, config.zone_size,
                                   config.block_size, faults, config.debug)
        table = init_table(drives, config.width, config.superblock_zones)
        table.sb_writer = SuperblockWriter(drives, config.superblock_zones, config.superblock_replicas)
        (root / CONFIG_NAME).write_text(config.to_text())
        table.write_superblock()
        replenish_available(table, config.pool_target)
        return cls(root, config, table, ObjectIndex(), FlashIndex(root / "flash"))

    @classmethod
    def open(cls, root, faults: FaultInjector | None = None, *, read_only: bool = False,
             **overrides) -> "Store":
        """Open an existing store.  Recovery always runs."""
        from .recovery import recover
        root = Path(root)
        config = StoreConfig.from_text((root / CONFIG_NAME).read_text())
        for k, v in overrides.items():
            setattr(config, k, v)
        drives = DriveArray.open(root / "drives", config.zones, config.zone_size, config.block_size,
                                 faults, config.debug)
        flash = FlashIndex(root / "flash")
        index, table, report = recover(drives, flash, superblock_zones=config.superblock_zones,
                                       read_only=read_only)
        store = cls(root, config, table, index, flash, last_snapshot=report.snapshot,
                    recovery_report=report, read_only=read_only)
        return store

    # -- writers -----------------------------------------------------------

    def _open_writer(self, *, reserve: int | None = None) -> ZoneSetWriter:
        cfg = self.config
        reserve = cfg.gc_reserve if reserve is None else reserve
        try:
            return open_zoneset(self.table, reserve=reserve, pool_target=cfg.pool_target,
                                durable_acks=cfg.durable_acks, fifo_bytes=cfg.fifo_bytes)
        except OutOfSpace:
            self.gc.make_space()
            return open_zoneset(self.table, reserve=reserve, pool_target=cfg.pool_target,
                                durable_acks=cfg.durable_acks, fifo_bytes=cfg.fifo_bytes)

    def _acquire_writer(self) -> ZoneSetWriter:
        if self.table.free_count() < self.config.gc_low_watermark:
            self.gc.make_space()
        with self._writers_lock:
            while self._idle:
                w = self._idle.pop()
                if not w.closed:
                    return w
        return self._open_writer()

    def _release_writer(self, writer: ZoneSetWriter) -> None:
        if writer.closed:
            return
        with self._writers_lock:
            self._idle.append(writer)

    def _retire_writer(self, writer: ZoneSetWriter) -> ZoneSetWriter:
        """Close a full writer and hand back a fresh one."""
        writer.close()
        return self._acquire_writer()

    def all_writers(self) -> list[ZoneSetWriter]:
        return list(self.table.writers.values())

    def flush(self) -> None:
        for w in self.all_writers():
            w.flush()

    # -- PUT ---------------------------------------------------------------

    def put(self, object_id, data) -> int:
        """Store ``data`` (bytes or a binary file object); return the new version."""
        self._check_writable()
        oid = normalize_object_id(object_id)
        ctx = PutContext(oid, self.clock.now())
        src = _Source(data)
        cfg = self.config
        inserted: list[tuple[IndexKey, IndexValue]] = []
        try:
            ctx.writer = self._acquire_writer()
            turn = 0
            while True:
                want = src.fill(cfg.segment_size)
                writer = ctx.writer
                if turn >= cfg.segments_per_turn:
                    self._release_writer(writer)
                    writer = ctx.writer = self._acquire_writer()
                    turn = 0
                if not writer.fits(want):
                    room = writer.max_segment_payload()
                    if room >= min(cfg.min_segment, want) and room > 0:
                        want = room
                    else:
                        ctx.writer = writer = self._retire_writer(writer)
                        continue
                with self.gate.read():
                    if self._superseded(oid, ctx.version):
                        self._discard(inserted)
                        return ctx.version
                    chunk = src.take(want)
                    src.fill(0)
                    complete = src.exhausted
                    ts = self.clock.now()
                    meta = SegmentMeta(oid, ctx.version, ctx.segments_written, complete, ts)
                    loc = writer.append_segment(meta, chunk)
                    key = IndexKey(oid, ctx.version, ctx.segments_written, complete)
                    value = IndexValue(loc.zoneset_id, loc.offset, want, ts)
                    with self.index.lock:
                        self.index.insert(key, value)
                        inserted.append((key, value))
                        if complete:
                            self._finish_put(oid, ctx.version, inserted)
                ctx.segments_written += 1
                turn += 1
                if complete:
                    break
        except Exception:
            if not self.table.drives.faults.crashed:
                with self.gate.read():
                    self._discard(inserted)
            raise
        finally:
            if ctx.writer is not None:
                self._release_writer(ctx.writer)
        self.bytes_ingested += src.total
        self._ingest_since_snapshot += src.total
        self.op_counts["put"] += 1
        self._after_mutation()
        return ctx.version

    def _superseded(self, oid: bytes, version: int) -> bool:
        if self.deleted_upto.get(oid, -1) >= version:
            return True
        latest = self.index.latest_complete_version(oid)
        return latest is not None and latest > version

    def _discard(self, entries) -> None:
        """Remove entries this PUT inserted, charging their space as dead."""
        with self.index.lock:
            for key, value in entries:
                if self.index.get(key) == value:
                    self.index.remove(key)
                    self.table.add_dead(value.zoneset_id, self.table.footprint(value.length))

    def _kill(self, removed) -> None:
        for _, value in removed:
            self.table.add_dead(value.zoneset_id, self.table.footprint(value.length))

    def _finish_put(self, oid: bytes, version: int, inserted) -> None:
        # caller holds the index lock
        if self._superseded(oid, version):
            self._discard(inserted)
            return
        self._kill(self.index.remove_where(oid, lambda k: k.version < version))

    # -- DELETE ------------------------------------------------------------

    def delete(self, object_id) -> bool:
        self._check_writable()
        oid = normalize_object_id(object_id)
        t = self.clock.now()
        if not any(k.version <= t for k, _ in self.index.lookup_object(oid)):
            return False
        writer = self._acquire_writer()
        try:
            while not writer.has_room_for_tombstone():
                writer = self._retire_writer(writer)
            with self.gate.read():
                writer.append_tombstone(oid, t, self.clock.now())
                with self.index.lock:
                    self._kill(self.index.remove_where(oid, lambda k: k.version <= t))
                    self.deleted_upto[oid] = max(self.deleted_upto.get(oid, 0), t)
            self._tombstones_since_snapshot += self.table.tombstone_bytes
        finally:
            self._release_writer(writer)
        self.op_counts["delete"] += 1
        self._after_mutation()
        return True

    # -- GET / STAT --------------------------------------------------------

    def _version_entries(self, oid: bytes):
        for _ in range(8):
            version = self.index.latest_complete_version(oid)
            if version is None:
                raise NotFound(oid.hex())
            entries = [(k, v) for k, v in self.index.lookup_object(oid) if k.version == version]
            ids = [k.segment_id for k, _ in entries]
            if ids == list(range(len(ids))) and entries and entries[-1][0].complete:
                return version, entries
        raise ReadError(f"object {oid.hex()}: inconsistent segment list")

    def get(self, object_id) -> tuple[int, bytes]:
        oid = normalize_object_id(object_id)
        version, entries = self._version_entries(oid)
        parts = [self._read_entry(k, v) for k, v in entries]
        self.op_counts["get"] += 1
        return version, b"".join(parts)

    def iter_get(self, object_id):
        """Yield ``(version, chunk)`` one segment at a time."""
        oid = normalize_object_id(object_id)
        version, entries = self._version_entries(oid)
        for k, v in entries:
            yield version, self._read_entry(k, v)

    def _read_entry(self, key: IndexKey, value: IndexValue) -> bytes:
        # GC may relocate the segment and trim its old set between the index
        # lookup and the read; a failed read is retried at the current location
        error = None
        for attempt in range(4):
            desc = self.table.sets[value.zoneset_id]
            with desc.lock.read():
                try:
                    return read_segment(self.table, value.zoneset_id, value.offset, value.length,
                                        (key.object_id, key.version, key.segment_id, key.complete,
                                         value.entry_timestamp))
                except StaleLocation:
                    error = None
                except SegmentReadError as e:
                    error = e
            current = self.index.get(key)
            if current is None:
                raise NotFound(key.object_id.hex())
            if current == value:
                if error is not None:
                    raise ReadError(str(error)) from error
                if attempt:
                    break
            value = current
        raise ReadError(f"segment {key} unreadable at {value}")

    def stat(self, object_id) -> ObjectStat:
        oid = normalize_object_id(object_id)
        version, entries = self._version_entries(oid)
        return ObjectStat(oid, version, sum(v.length for _, v in entries), len(entries))

    def exists(self, object_id) -> bool:
        return self.index.latest_complete_version(normalize_object_id(object_id)) is not None

    # -- snapshots -----------------------------------------------------------

    def _after_mutation(self) -> None:
        cfg = self.config
        self._ops_since_flash += 1
        # a full dump per N ops would be quadratic; wait at least one op per entry dumped
        if cfg.flash_persist_ops and self._ops_since_flash >= self._flash_threshold:
            self._ops_since_flash = 0
            self._flash_threshold = max(cfg.flash_persist_ops, len(self.index))
            self.flash.persist_async(self.index.copy(), self.clock.last)
        due = cfg.snapshot_every_bytes and self._ingest_since_snapshot >= cfg.snapshot_every_bytes
        due = due or (cfg.snapshot_tombstone_fraction and self._tombstones_since_snapshot
                      >= cfg.snapshot_tombstone_fraction * cfg.capacity)
        if due:
            self.snapshot()

    def _open_index_writer(self) -> ZoneSetWriter:
        table = self.table
        if table.free_count() <= self.config.gc_reserve + 1:
            self.gc.make_space()
        with table.lock:
            if table.free_count() == 0:
                raise OutOfSpace("no zone set for the index snapshot")
            if not table.ids_in(ZoneSetState.AVAILABLE):
                replenish_available(table, self.config.pool_target)
            z = table.ids_in(ZoneSetState.AVAILABLE)[0]
            table.transition(z, ZoneSetState.INDEX)
            return ZoneSetWriter(table, table.sets[z], durable_acks=False,
                                 fifo_bytes=self.config.fifo_bytes, category_prefix="index_")

    def snapshot(self) -> SnapshotManifest:
        """Quiesce, copy the index to flash, then store it in dedicated INDEX zone sets."""
        self._check_writable()
        with self._snapshot_lock:
            table = self.table
            t0 = time.perf_counter()
            with self.gate.write():
                self.flush()
                created_at = self.clock.now()
                sid = (self.last_snapshot.snapshot_id + 1) if self.last_snapshot else 1
                data = encode_snapshot(self.index, sid, created_at)
                with table.lock:
                    # every tombstone written so far expires with this snapshot
                    captured = {z: (d.generation, d.write_offset,
                                    d.dead_bytes + len(d.live_tombstones) * table.tombstone_bytes,
                                    d.state == ZoneSetState.CLOSED)
                                for z, d in table.sets.items()}
                self.flash.write_snapshot(sid, data)
            self.snapshot_quiesce_seconds.append(time.perf_counter() - t0)
            self._ingest_since_snapshot = 0
            self._tombstones_since_snapshot = 0
            manifest = SnapshotManifest(sid, created_at, len(data), snapshot_checksum(data), False)
            previous = list(table.snapshots)

            writer = self._open_index_writer()
            manifest.index_sets.append(writer.zoneset_id)
            table.snapshots = previous + [manifest.to_location()]
            table.write_superblock()
            view = memoryview(data)
            pos = seg = 0
            while True:
                want = min(self.config.segment_size, len(data) - pos)
                if not writer.fits(want):
                    room = writer.max_segment_payload()
                    if room > 0 and want > 0:
                        want = room
                    else:
                        writer.close()
                        writer = self._open_index_writer()
                        manifest.index_sets.append(writer.zoneset_id)
                        table.snapshots = previous + [manifest.to_location()]
                        table.write_superblock()
                        continue
                complete = pos + want == len(data)
                loc = writer.append_segment(SegmentMeta(SNAPSHOT_OBJECT, sid, seg, complete,
                                                        self.clock.now()), view[pos:pos + want])
                manifest.extents.append((loc.zoneset_id, loc.offset, want))
                pos += want
                seg += 1
                if complete:
                    break
            writer.close()
            manifest.complete = True

            old_index_sets = [z for s in previous for z in s.index_sets]
            with self.gate.write(), table.lock:
                for z, (gen, wo, dead, was_closed) in captured.items():
                    d = table.sets[z]
                    if d.generation != gen or d.state in (ZoneSetState.EMPTY, ZoneSetState.INDEX):
                        continue
                    d.indexed_offset = wo
                    d.snapshot_dead = dead
                    if was_closed and d.state == ZoneSetState.CLOSED:
                        table.transition(z, ZoneSetState.INDEXED)
                table.snapshots = [manifest.to_location()]
                table.expire_tombstones(created_at)
                self.last_snapshot = manifest.to_location()
            table.write_superblock()
            for z in old_index_sets:
                if table.sets[z].state == ZoneSetState.INDEX:
                    trim_zoneset(table, z)
            self.flash.write_manifest([manifest])
            self.flash.prune({sid})
            logger.info("snapshot %d: %d entries, %d bytes in sets %s", sid, len(self.index),
                        len(data), manifest.index_sets)
            return manifest

    # -- lifecycle -----------------------------------------------------------

    def _check_writable(self) -> None:
        if self.read_only:
            raise StoreError("store opened read-only")
        if self.closed:
            raise StoreError("store is closed")

    def utilization(self) -> float:
        """Live footprint over raw zone-set capacity."""
        fp = sum(self.table.footprint(v.length) for _, v in self.index.items())
        return fp / self.config.capacity

    def close(self, snapshot: bool = True) -> None:
        """Clean shutdown: flush, snapshot, and leave open sets resumable."""
        if self.closed:
            return
        self.gc.stop()
        if not self.read_only and not self.table.drives.faults.crashed:
            self.flush()
            if snapshot:
                self.snapshot()
            for w in self.all_writers():
                w.detach()
                w.desc.digest_stale = True
            self.flash.persist_async(self.index.copy(), self.clock.last)
        self.flash.close()
        self.table.drives.close()
        self.closed = True

    def abandon(self) -> None:
        """Drop the store without any further writes, as after a host crash."""
        if self.closed:
            return
        self.gc.stop()
        self.flash.close()
        self.table.drives.close()
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def as_stream(data: bytes):
    return io.BytesIO(data)
