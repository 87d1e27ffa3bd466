"""File-backed emulator for host-managed zoned block devices.

Each drive is a sparse data file (zone ``i`` starts at byte ``i * zone_capacity``)
plus a small state file holding the per-zone write pointers.  Zones only accept
block-aligned appends at the write pointer and are erased as a whole by
:func:`reset_zone`.

Crash and drive-failure faults are injected through a :class:`FaultInjector`
shared by all drives of an array, so a single byte budget can model a system
crash that stops every device at the same instant.
"""

from __future__ import annotations

import logging
import os
import random
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

from crc32c import crc32c

logger = logging.getLogger(__name__)

STATE_MAGIC = b"ZBDS"
STATE_VERSION = 1
_STATE_HEADER = struct.Struct("<4sII")


class ZbdError(Exception):
    """Base class for emulated device errors."""


class GeometryMismatch(ZbdError):
    pass


class ZoneFull(ZbdError):
    pass


class Misaligned(ZbdError):
    pass


class ReadPastWritePointer(ZbdError):
    pass


class CrashInjected(ZbdError):
    """The fault plan fired; the emulated host is considered dead."""


class DriveFailed(ZbdError):
    pass


class ConcurrentAppend(ZbdError):
    pass


class CorruptState(ZbdError):
    pass


@dataclass(frozen=True)
class DriveGeometry:
    drive_id: int
    zone_count: int
    zone_capacity: int
    block_size: int = 4096

    def __post_init__(self):
        if self.block_size < 512 or self.block_size & (self.block_size - 1):
            raise ValueError(f"block_size must be a power of two >= 512, got {self.block_size}")
        if self.zone_count < 1:
            raise ValueError("zone_count must be >= 1")
        if self.zone_capacity <= 0 or self.zone_capacity % self.block_size:
            raise ValueError("zone_capacity must be a positive multiple of block_size")

    def with_id(self, drive_id: int) -> "DriveGeometry":
        return DriveGeometry(drive_id, self.zone_count, self.zone_capacity, self.block_size)


@dataclass(frozen=True)
class ZoneDescriptor:
    zone_id: int
    write_pointer: int


@dataclass
class FaultPlan:
    """What to break and when.

    ``crash_after_bytes`` counts bytes appended across every drive sharing the
    injector.  With ``seed`` set and no explicit budget, the budget is drawn
    uniformly from ``[0, random_window)``.
    """

    crash_after_bytes: int | None = None
    fail_drive: int | None = None
    seed: int | None = None
    random_window: int = 0


class FaultInjector:
    def __init__(self, plan: FaultPlan | None = None):
        plan = plan or FaultPlan()
        self.plan = plan
        self.crash_after_bytes = plan.crash_after_bytes
        if self.crash_after_bytes is None and plan.seed is not None and plan.random_window > 0:
            self.crash_after_bytes = random.Random(plan.seed).randrange(plan.random_window)
        self.failed: set[int] = set()
        if plan.fail_drive is not None:
            self.failed.add(plan.fail_drive)
        self.appended = 0
        self.crashed = False
        self._lock = threading.Lock()

    def arm(self, crash_after_bytes: int | None) -> None:
        """(Re)arm the crash trigger relative to the bytes appended so far."""
        with self._lock:
            self.crash_after_bytes = None if crash_after_bytes is None else self.appended + crash_after_bytes

    def fail(self, drive_id: int) -> None:
        self.failed.add(drive_id)

    def check(self, drive_id: int) -> None:
        if self.crashed:
            raise CrashInjected("host crashed")
        if drive_id in self.failed:
            raise DriveFailed(f"drive {drive_id} failed")

    def admit(self, drive_id: int, nbytes: int, block_size: int) -> int:
        """Return how many bytes of an append may land before the crash fires."""
        with self._lock:
            self.check(drive_id)
            if self.crash_after_bytes is None:
                self.appended += nbytes
                return nbytes
            budget = max(0, self.crash_after_bytes - self.appended)
            if nbytes <= budget:
                self.appended += nbytes
                return nbytes
            allowed = budget // block_size * block_size
            self.appended += allowed
            self.crashed = True
            return allowed


class Drive:
    """Handle to one emulated drive.  Use :func:`open_drive` to create."""

    def __init__(self, directory: Path, geometry: DriveGeometry,
                 faults: FaultInjector | None = None, debug: bool = False):
        self.geometry = geometry
        self.directory = Path(directory)
        self.faults = faults or FaultInjector()
        self.debug = debug
        self.data_path = self.directory / f"drive{geometry.drive_id}.dat"
        self.state_path = self.directory / f"drive{geometry.drive_id}.state"
        self.bytes_appended = 0
        self._zone_locks = [threading.Lock() for _ in range(geometry.zone_count)]
        self._state_lock = threading.Lock()

        size = geometry.zone_count * geometry.zone_capacity
        if self.state_path.exists():
            wps = self._load_state()
            if len(wps) != geometry.zone_count or self.data_path.stat().st_size != size:
                raise GeometryMismatch(
                    f"{self.data_path} does not match zone_count={geometry.zone_count} "
                    f"zone_capacity={geometry.zone_capacity}")
            self._wp = wps
        else:
            self.directory.mkdir(parents=True, exist_ok=True)
            with open(self.data_path, "wb") as f:
                f.truncate(size)
            self._wp = [0] * geometry.zone_count
        self._data_fd = os.open(self.data_path, os.O_RDWR)
        self._state_fd = os.open(self.state_path, os.O_RDWR | os.O_CREAT, 0o644)
        self._persist_state()

    @property
    def drive_id(self) -> int:
        return self.geometry.drive_id

    @property
    def failed(self) -> bool:
        return self.drive_id in self.faults.failed

    def _load_state(self) -> list[int]:
        raw = self.state_path.read_bytes()
        if len(raw) < _STATE_HEADER.size + 4:
            raise CorruptState(f"{self.state_path} truncated")
        magic, version, count = _STATE_HEADER.unpack_from(raw)
        if magic != STATE_MAGIC or version != STATE_VERSION:
            raise CorruptState(f"{self.state_path}: bad magic or version")
        end = _STATE_HEADER.size + 8 * count
        if len(raw) < end + 4:
            raise CorruptState(f"{self.state_path} truncated")
        (crc,) = struct.unpack_from("<I", raw, end)
        if crc32c(raw[:end]) != crc:
            raise CorruptState(f"{self.state_path}: checksum mismatch")
        return list(struct.unpack_from(f"<{count}Q", raw, _STATE_HEADER.size))

    def _persist_state(self) -> None:
        with self._state_lock:
            body = _STATE_HEADER.pack(STATE_MAGIC, STATE_VERSION, self.geometry.zone_count)
            body += struct.pack(f"<{len(self._wp)}Q", *self._wp)
            os.pwrite(self._state_fd, body + struct.pack("<I", crc32c(body)), 0)

    def _check_zone(self, zone_id: int) -> None:
        if not 0 <= zone_id < self.geometry.zone_count:
            raise IndexError(f"zone {zone_id} out of range")

    def write_pointer(self, zone_id: int) -> int:
        self._check_zone(zone_id)
        return self._wp[zone_id]

    def append(self, zone_id: int, data) -> int:
        self._check_zone(zone_id)
        g = self.geometry
        n = len(data)
        if n % g.block_size:
            raise Misaligned(f"append of {n} bytes is not a multiple of {g.block_size}")
        lock = self._zone_locks[zone_id]
        if self.debug:
            if not lock.acquire(blocking=False):
                raise ConcurrentAppend(f"concurrent append to zone {zone_id}")
        else:
            lock.acquire()
        try:
            self.faults.check(self.drive_id)
            wp = self._wp[zone_id]
            if wp + n > g.zone_capacity:
                raise ZoneFull(f"zone {zone_id}: wp={wp} + {n} > {g.zone_capacity}")
            allowed = self.faults.admit(self.drive_id, n, g.block_size)
            if allowed:
                view = memoryview(data)[:allowed]
                written = os.pwrite(self._data_fd, view, zone_id * g.zone_capacity + wp)
                assert written == allowed
                self._wp[zone_id] = wp + allowed
                self.bytes_appended += allowed
                self._persist_state()
            if allowed < n:
                raise CrashInjected(f"crash during append to drive {self.drive_id} zone {zone_id} "
                                    f"({allowed}/{n} bytes durable)")
            return wp
        finally:
            lock.release()

    def read(self, zone_id: int, offset: int, length: int) -> bytes:
        self._check_zone(zone_id)
        bs = self.geometry.block_size
        if offset % bs or length % bs:
            raise Misaligned(f"read [{offset}, +{length}) is not block aligned")
        self.faults.check(self.drive_id)
        if offset + length > self._wp[zone_id]:
            raise ReadPastWritePointer(
                f"zone {zone_id}: read to {offset + length} beyond wp {self._wp[zone_id]}")
        if length == 0:
            return b""
        return os.pread(self._data_fd, length, zone_id * self.geometry.zone_capacity + offset)

    def reset(self, zone_id: int) -> None:
        self._check_zone(zone_id)
        self.faults.check(self.drive_id)
        with self._zone_locks[zone_id]:
            if self._wp[zone_id]:
                self._wp[zone_id] = 0
                self._persist_state()

    def report_zones(self) -> list[ZoneDescriptor]:
        self.faults.check(self.drive_id)
        return [ZoneDescriptor(i, wp) for i, wp in enumerate(self._wp)]

    def close(self) -> None:
        if self._data_fd >= 0:
            if not self.faults.crashed:
                self._persist_state()
            os.close(self._data_fd)
            os.close(self._state_fd)
            self._data_fd = self._state_fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


DriveHandle = Drive


def open_drive(backing_path, geometry: DriveGeometry, faults: FaultInjector | None = None,
               debug: bool = False) -> Drive:
    return Drive(Path(backing_path), geometry, faults, debug)


def zone_append(drive: Drive, zone_id: int, data) -> int:
    return drive.append(zone_id, data)


def zone_read(drive: Drive, zone_id: int, offset: int, length: int) -> bytes:
    return drive.read(zone_id, offset, length)


def reset_zone(drive: Drive, zone_id: int) -> None:
    drive.reset(zone_id)


def report_zones(drive: Drive) -> list[ZoneDescriptor]:
    return drive.report_zones()


class DriveArray:
    """The set of drives backing one store, keyed by drive id."""

    def __init__(self, directory, drives: dict[int, Drive], faults: FaultInjector):
        self.directory = Path(directory)
        self.drives = drives
        self.faults = faults

    @classmethod
    def create(cls, directory, n_drives: int, zone_count: int, zone_capacity: int,
               block_size: int = 4096, faults: FaultInjector | None = None,
               debug: bool = False) -> "DriveArray":
        faults = faults or FaultInjector()
        drives = {}
        for d in range(n_drives):
            g = DriveGeometry(d, zone_count, zone_capacity, block_size)
            if (Path(directory) / f"drive{d}.state").exists():
                raise FileExistsError(f"drive{d} already exists in {directory}")
            drives[d] = open_drive(directory, g, faults, debug)
        return cls(directory, drives, faults)

    @classmethod
    def open(cls, directory, zone_count: int, zone_capacity: int, block_size: int = 4096,
             faults: FaultInjector | None = None, debug: bool = False) -> "DriveArray":
        faults = faults or FaultInjector()
        drives = {}
        for state in sorted(Path(directory).glob("drive*.state")):
            d = int(state.stem[len("drive"):])
            drives[d] = open_drive(directory, DriveGeometry(d, zone_count, zone_capacity, block_size),
                                   faults, debug)
        if not drives:
            raise FileNotFoundError(f"no drives in {directory}")
        return cls(directory, drives, faults)

    def add_drive(self, debug: bool = False) -> Drive:
        """Attach a fresh drive (a replacement/spare) with the next free id."""
        g = self.geometry
        d = max(self.drives) + 1
        drive = open_drive(self.directory, g.with_id(d), self.faults, debug)
        self.drives[d] = drive
        return drive

    @property
    def geometry(self) -> DriveGeometry:
        return next(iter(self.drives.values())).geometry

    @property
    def block_size(self) -> int:
        return self.geometry.block_size

    @property
    def zone_capacity(self) -> int:
        return self.geometry.zone_capacity

    def __getitem__(self, drive_id: int) -> Drive:
        return self.drives[drive_id]

    def live_ids(self) -> list[int]:
        return [d for d in sorted(self.drives) if d not in self.faults.failed]

    def bytes_appended(self) -> int:
        return sum(d.bytes_appended for d in self.drives.values())

    def close(self) -> None:
        for d in self.drives.values():
            d.close()
