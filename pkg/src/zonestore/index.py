"""Operational index: object segments to zone-set locations.

The live index is an in-memory map grouped by object id, so a prefix lookup is
a dictionary hit followed by a small sort.  Copies are persisted to a flash
directory (asynchronously, with no crash consistency of their own) and
snapshotted into dedicated INDEX zone sets by the store.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from crc32c import crc32c

from .layout import OBJECT_ID_BYTES, SnapshotLocation

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"ZIDX"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sBxxxQQQ")
_SNAP_RECORD = struct.Struct("<32sQIBIQQQ")
_U32 = struct.Struct("<I")


class SnapshotError(Exception):
    pass


class SnapshotCorrupt(SnapshotError):
    pass


class SnapshotIncomplete(SnapshotError):
    pass


@dataclass(frozen=True, order=True)
class IndexKey:
    object_id: bytes
    version: int
    segment_id: int
    complete: bool


@dataclass(frozen=True)
class IndexValue:
    zoneset_id: int
    offset: int
    length: int
    entry_timestamp: int


class ObjectIndex:
    def __init__(self):
        self._objects: dict[bytes, dict[tuple, IndexValue]] = {}
        self._count = 0
        self.lock = threading.RLock()

    def __len__(self) -> int:
        return self._count

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObjectIndex):
            return NotImplemented
        return self._objects == other._objects

    def __contains__(self, key: IndexKey) -> bool:
        return self.get(key) is not None

    def insert(self, key: IndexKey, value: IndexValue) -> None:
        with self.lock:
            slot = self._objects.setdefault(key.object_id, {})
            tail = (key.version, key.segment_id, key.complete)
            if tail not in slot:
                self._count += 1
            slot[tail] = value

    def get(self, key: IndexKey) -> IndexValue | None:
        slot = self._objects.get(key.object_id)
        if slot is None:
            return None
        return slot.get((key.version, key.segment_id, key.complete))

    def remove(self, key: IndexKey) -> bool:
        with self.lock:
            return self._pop(key.object_id, (key.version, key.segment_id, key.complete)) is not None

    def _pop(self, oid: bytes, tail: tuple) -> IndexValue | None:
        slot = self._objects.get(oid)
        if slot is None or tail not in slot:
            return None
        value = slot.pop(tail)
        self._count -= 1
        if not slot:
            del self._objects[oid]
        return value

    def replace_if(self, key: IndexKey, expected: IndexValue, new: IndexValue) -> bool:
        """Swap the value for ``key`` only if it still equals ``expected``."""
        with self.lock:
            slot = self._objects.get(key.object_id)
            tail = (key.version, key.segment_id, key.complete)
            if slot is None or slot.get(tail) != expected:
                return False
            slot[tail] = new
            return True

    def lookup_object(self, object_id: bytes) -> list[tuple[IndexKey, IndexValue]]:
        with self.lock:
            slot = self._objects.get(object_id)
            if not slot:
                return []
            items = sorted(slot.items())
        return [(IndexKey(object_id, *tail), value) for tail, value in items]

    def versions(self, object_id: bytes) -> dict[int, list[tuple[IndexKey, IndexValue]]]:
        out: dict[int, list] = {}
        for key, value in self.lookup_object(object_id):
            out.setdefault(key.version, []).append((key, value))
        return out

    def latest_complete_version(self, object_id: bytes) -> int | None:
        slot = self._objects.get(object_id)
        if not slot:
            return None
        with self.lock:
            complete = [v for (v, _, c) in slot if c]
        return max(complete, default=None)

    def remove_where(self, object_id: bytes, predicate) -> list[tuple[IndexKey, IndexValue]]:
        """Remove every entry of ``object_id`` whose key satisfies ``predicate``."""
        removed = []
        with self.lock:
            slot = self._objects.get(object_id)
            if not slot:
                return removed
            for tail in [t for t in slot if predicate(IndexKey(object_id, *t))]:
                removed.append((IndexKey(object_id, *tail), self._pop(object_id, tail)))
        return removed

    def object_ids(self) -> list[bytes]:
        with self.lock:
            return list(self._objects)

    def items(self):
        """All entries in key order."""
        with self.lock:
            oids = sorted(self._objects)
            snapshot = [(oid, sorted(self._objects[oid].items())) for oid in oids]
        for oid, entries in snapshot:
            for tail, value in entries:
                yield IndexKey(oid, *tail), value

    def copy(self) -> "ObjectIndex":
        out = ObjectIndex()
        with self.lock:
            out._objects = {oid: dict(slot) for oid, slot in self._objects.items()}
            out._count = self._count
        return out


def insert(index: ObjectIndex, key: IndexKey, value: IndexValue) -> None:
    index.insert(key, value)


def remove(index: ObjectIndex, key: IndexKey) -> bool:
    return index.remove(key)


def lookup_object(index: ObjectIndex, object_id: bytes):
    return index.lookup_object(object_id)


def latest_complete_version(index: ObjectIndex, object_id: bytes) -> int | None:
    return index.latest_complete_version(object_id)


# ---------------------------------------------------------------------------
# snapshot files

@dataclass(frozen=True)
class SnapshotHeader:
    snapshot_id: int
    created_at: int
    entry_count: int


def encode_snapshot(index: ObjectIndex, snapshot_id: int, created_at: int) -> bytes:
    records = [_SNAP_RECORD.pack(k.object_id, k.version, k.segment_id, int(k.complete),
                                 v.zoneset_id, v.offset, v.length, v.entry_timestamp)
               for k, v in index.items()]
    body = _SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, snapshot_id, created_at,
                             len(records)) + b"".join(records)
    return body + _U32.pack(crc32c(body))


def decode_snapshot(data) -> tuple[ObjectIndex, SnapshotHeader]:
    data = bytes(data)
    if len(data) < _SNAP_HEADER.size + 4:
        raise SnapshotIncomplete("snapshot shorter than its header")
    magic, version, sid, created, count = _SNAP_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotCorrupt("bad snapshot magic")
    end = _SNAP_HEADER.size + count * _SNAP_RECORD.size
    if len(data) < end + 4:
        raise SnapshotIncomplete(f"snapshot truncated: {len(data)} < {end + 4} bytes")
    if len(data) > end + 4:
        raise SnapshotCorrupt("trailing bytes after snapshot")
    if crc32c(data[:end]) != _U32.unpack_from(data, end)[0]:
        raise SnapshotCorrupt("snapshot checksum mismatch")
    if version != SNAPSHOT_VERSION:
        raise SnapshotCorrupt(f"unknown snapshot version {version}")
    index = ObjectIndex()
    objects = index._objects
    for oid, ver, seg, complete, zid, off, length, ts in \
            _SNAP_RECORD.iter_unpack(data[_SNAP_HEADER.size:end]):
        objects.setdefault(oid, {})[(ver, seg, bool(complete))] = IndexValue(zid, off, length, ts)
    index._count = count
    return index, SnapshotHeader(sid, created, count)


@dataclass
class SnapshotManifest:
    snapshot_id: int
    created_at: int
    length: int = 0
    checksum: int = 0
    complete: bool = False
    index_sets: list = field(default_factory=list)
    extents: list = field(default_factory=list)

    def to_location(self) -> SnapshotLocation:
        return SnapshotLocation(self.snapshot_id, self.created_at, self.complete, self.length,
                                self.checksum, tuple(tuple(e) for e in self.extents),
                                tuple(self.index_sets))

    @classmethod
    def from_location(cls, loc: SnapshotLocation) -> "SnapshotManifest":
        return cls(loc.snapshot_id, loc.created_at, loc.length, loc.checksum, loc.complete,
                   list(loc.index_sets), [tuple(e) for e in loc.extents])


def snapshot_checksum(data: bytes) -> int:
    return crc32c(data)


class FlashIndex:
    """Index copies kept on the flash device.

    Layout::

        <flash>/index/current/run-0000.idx   latest asynchronous copy
        <flash>/index/current/manifest       JSON: snapshot_id, created_at, entries, length
        <flash>/index/snapshots/snap-<id>.idx
        <flash>/index/snapshots/manifest     JSON list of retained snapshots (at most two)
    """

    def __init__(self, root):
        self.root = Path(root)
        self.current_dir = self.root / "index" / "current"
        self.snapshot_dir = self.root / "index" / "snapshots"
        self._executor: ThreadPoolExecutor | None = None
        self._pending = None

    def _ensure(self) -> None:
        self.current_dir.mkdir(parents=True, exist_ok=True)
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _atomic_write(path: Path, data: bytes) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def write_current(self, data: bytes, created_at: int = 0) -> None:
        self._ensure()
        self._atomic_write(self.current_dir / "run-0000.idx", data)
        meta = {"created_at": created_at, "length": len(data)}
        self._atomic_write(self.current_dir / "manifest", json.dumps(meta).encode())

    def persist_async(self, index: ObjectIndex, created_at: int = 0) -> None:
        """Serialize now, write in the background; the foreground never waits on I/O."""
        data = encode_snapshot(index, 0, created_at)
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="flash-index")
        self._pending = self._executor.submit(self.write_current, data, created_at)

    def wait(self) -> None:
        if self._pending is not None:
            self._pending.result()
            self._pending = None

    def read_current(self) -> bytes | None:
        path = self.current_dir / "run-0000.idx"
        return path.read_bytes() if path.exists() else None

    def snapshot_path(self, snapshot_id: int) -> Path:
        return self.snapshot_dir / f"snap-{snapshot_id:016x}.idx"

    def write_snapshot(self, snapshot_id: int, data: bytes) -> None:
        self._ensure()
        self._atomic_write(self.snapshot_path(snapshot_id), data)

    def read_snapshot(self, snapshot_id: int) -> bytes | None:
        path = self.snapshot_path(snapshot_id)
        return path.read_bytes() if path.exists() else None

    def write_manifest(self, manifests: list[SnapshotManifest]) -> None:
        self._ensure()
        rows = [{"snapshot_id": m.snapshot_id, "created_at": m.created_at, "length": m.length,
                 "checksum": m.checksum, "complete": m.complete} for m in manifests]
        self._atomic_write(self.snapshot_dir / "manifest", json.dumps(rows, indent=1).encode())

    def prune(self, keep: set[int]) -> None:
        if not self.snapshot_dir.exists():
            return
        for path in self.snapshot_dir.glob("snap-*.idx"):
            if int(path.stem[len("snap-"):], 16) not in keep:
                path.unlink(missing_ok=True)

    def close(self) -> None:
        self.wait()
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def snapshot_load(manifest: SnapshotManifest, flash: FlashIndex | None = None,
                  read_extent=None) -> tuple[ObjectIndex, str]:
    """Load a complete snapshot, preferring the flash copy.

    ``read_extent(zoneset_id, offset, length)`` returns the bytes of one
    snapshot segment stored in an INDEX zone set.  Returns the index and the
    source used (``"flash"`` or ``"smr"``).
    """
    if not manifest.complete:
        raise SnapshotIncomplete(f"snapshot {manifest.snapshot_id} never completed")
    if flash is not None:
        data = flash.read_snapshot(manifest.snapshot_id)
        if data is not None and len(data) == manifest.length and crc32c(data) == manifest.checksum:
            try:
                index, header = decode_snapshot(data)
                if header.snapshot_id == manifest.snapshot_id:
                    return index, "flash"
            except SnapshotError:
                logger.warning("flash copy of snapshot %d is damaged", manifest.snapshot_id)
    if read_extent is None:
        raise SnapshotIncomplete(f"snapshot {manifest.snapshot_id} unavailable on flash")
    data = b"".join(read_extent(z, off, length) for z, off, length in manifest.extents)
    if len(data) != manifest.length:
        raise SnapshotIncomplete(f"snapshot {manifest.snapshot_id}: {len(data)} of {manifest.length} bytes")
    if crc32c(data) != manifest.checksum:
        raise SnapshotCorrupt(f"snapshot {manifest.snapshot_id} checksum mismatch")
    index, _ = decode_snapshot(data)
    if flash is not None:
        flash.write_snapshot(manifest.snapshot_id, data)
    return index, "smr"


assert _SNAP_RECORD.size == OBJECT_ID_BYTES + 41
