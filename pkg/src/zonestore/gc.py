"""Greedy garbage collection of zone sets.

Dead space is tracked per zone set as the footprint of segments the index no
longer references.  Cleaning copies the live segments of the set with the
most dead space into a dedicated GC output set, carries forward tombstones
newer than the last complete index snapshot, and trims the victim.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from .index import IndexKey, IndexValue
from .layout import RecordType
from .zoneset import (OutOfSpace, SegmentMeta, ZoneSetState, ZoneSetTable,
                      ZoneSetWriter, open_zoneset, read_digest, read_shards, set_entries,
                      trim_zoneset)

logger = logging.getLogger(__name__)


@dataclass
class GcPolicy:
    low_watermark: int = 3
    idle_interval: float = 0.05
    max_concurrent_cleans: int = 1
    # background cleaning of sets at least this dead even when space is plentiful
    idle_dead_fraction: float = 1.0

    def __post_init__(self):
        if self.low_watermark < 1:
            raise ValueError("low_watermark must be >= 1")


@dataclass
class GcMetrics:
    bytes_relocated: int = 0
    bytes_reclaimed: int = 0
    cleans_completed: int = 0
    segments_relocated: int = 0
    tombstones_carried: int = 0
    tombstones_dropped: int = 0
    clean_seconds: list = field(default_factory=list)


def _horizon(store) -> int:
    """Tombstones older than the last complete snapshot are no longer needed."""
    return store.last_snapshot.created_at if store.last_snapshot else 0


def select_victim(table: ZoneSetTable, ledger: dict | None = None) -> int | None:
    """CLOSED or INDEXED set with the most dead bytes; lowest id on ties."""
    best = None
    best_dead = 0
    with table.lock:
        for z in table.ids_in(ZoneSetState.CLOSED, ZoneSetState.INDEXED):
            dead = ledger[z] if ledger is not None else table.sets[z].dead_bytes
            if dead > best_dead:
                best, best_dead = z, dead
    return best


class GarbageCollector:
    def __init__(self, store, policy: GcPolicy | None = None):
        self.store = store
        self.policy = policy or GcPolicy()
        self.metrics = GcMetrics()
        self.writer: ZoneSetWriter | None = None
        self.lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.errors: list = []

    @property
    def table(self) -> ZoneSetTable:
        return self.store.table

    def _destination(self) -> ZoneSetWriter:
        if self.writer is None or self.writer.closed:
            cfg = self.store.config
            self.writer = open_zoneset(self.table, reserve=0, pool_target=cfg.pool_target,
                                       durable_acks=cfg.durable_acks, fifo_bytes=cfg.fifo_bytes)
        return self.writer

    def _next_destination(self) -> ZoneSetWriter:
        # whole segments cannot fill the tail, but foreground writes split to fit
        w, self.writer = self.writer, None
        w.flush()
        self.store._release_writer(w)
        return self._destination()

    def clean_zoneset(self, zoneset_id: int) -> int:
        """Relocate live data out of ``zoneset_id`` and trim it; return bytes reclaimed."""
        with self.lock:
            return self._clean(zoneset_id)

    def _clean(self, zoneset_id: int) -> int:
        store = self.store
        table = self.table
        desc = table.sets[zoneset_id]
        if desc.state not in (ZoneSetState.CLOSED, ZoneSetState.INDEXED):
            raise ValueError(f"zone set {zoneset_id} is {desc.state.name}, not cleanable")
        t0 = time.perf_counter()
        written = desc.write_offset * desc.width
        with desc.lock.read():
            entries = set_entries(table, desc)[0]
        # segments that overflow the current output set wait for the next one, so
        # smaller segments behind them can fill its tail first
        deferred = []
        for e in entries:
            if e.record_type == RecordType.TOMBSTONE:
                self._carry_tombstone(e)
            elif not self._relocate(zoneset_id, e, defer=True):
                deferred.append(e)
        for e in deferred:
            self._relocate(zoneset_id, e, defer=False)
        with store.gate.read():
            if self.writer is not None:
                self.writer.flush()
            trim_zoneset(table, zoneset_id)
        reclaimed = written
        self.metrics.bytes_reclaimed += reclaimed
        self.metrics.cleans_completed += 1
        self.metrics.clean_seconds.append(time.perf_counter() - t0)
        logger.debug("cleaned zone set %d: %d entries", zoneset_id, len(entries))
        return reclaimed

    def _carry_tombstone(self, e) -> None:
        store = self.store
        with store.gate.read():
            if e.entry_timestamp < _horizon(store):
                self.metrics.tombstones_dropped += 1
                return
            dest = self._destination()
            if not dest.has_room_for_tombstone():
                dest = self._next_destination()
            dest.append_tombstone(e.object_id, e.version, e.entry_timestamp)
        self.metrics.tombstones_carried += 1

    def _relocate(self, zoneset_id: int, e, *, defer: bool) -> bool:
        """Copy one segment if it is still live.  False if deferred for lack of room."""
        store = self.store
        table = self.table
        index = store.index
        desc = table.sets[zoneset_id]
        key = IndexKey(e.object_id, e.version, e.segment_id, e.complete)
        with store.gate.read():
            cur = index.get(key)
            if cur is None or (cur.zoneset_id, cur.offset) != (zoneset_id, e.offset):
                return True
            dest = self._destination()
            if not dest.fits(e.segment_length):
                if defer:
                    return False
                dest = self._next_destination()
            checksums = e.checksums or None
            with desc.lock.read():
                frags = read_shards(table, desc, e.offset, e.segment_length, checksums)
            ts = store.clock.now()
            meta = SegmentMeta(e.object_id, e.version, e.segment_id, e.complete, ts)
            loc = dest.append_fragments(meta, e.segment_length, frags, checksums)
            fp = table.footprint(e.segment_length)
            with index.lock:
                if index.replace_if(key, cur, IndexValue(loc.zoneset_id, loc.offset,
                                                         e.segment_length, ts)):
                    table.add_dead(zoneset_id, fp)
                else:
                    table.add_dead(loc.zoneset_id, fp)
        self.metrics.bytes_relocated += fp
        self.metrics.segments_relocated += 1
        return True

    def make_space(self, target: int | None = None) -> int:
        """Clean greedily until ``target`` sets are free (default: the low watermark).

        Stops early once the remaining dead space could not add up to another
        free set, so a store running near its utilization ceiling does not
        relocate the same live data round and round.
        """
        target = self.policy.low_watermark if target is None else target
        table = self.table
        set_bytes = table.width * table.zone_capacity
        cleaned = 0
        with self.lock:
            while table.free_count() < target and cleaned < len(table.sets):
                victim = select_victim(table)
                if victim is None:
                    break
                if self.reclaimable() < set_bytes:
                    break
                self._clean(victim)
                cleaned += 1
        if cleaned == 0 and table.free_count() == 0:
            raise OutOfSpace("no free zone sets and nothing to clean")
        return cleaned

    def reclaimable(self) -> int:
        """Dead bytes in cleanable sets plus the unwritten tail of the GC output set."""
        table = self.table
        with table.lock:
            dead = sum(table.sets[z].dead_bytes
                       for z in table.ids_in(ZoneSetState.CLOSED, ZoneSetState.INDEXED))
        w = self.writer
        if w is not None and not w.closed:
            dead += (table.zone_capacity - w.desc.write_offset) * table.width
        return dead

    def collect_once(self) -> int | None:
        """One background step: clean a victim if space is low or it is mostly dead."""
        with self.lock:
            table = self.table
            victim = select_victim(table)
            if victim is None:
                return None
            desc = table.sets[victim]
            low = table.free_count() < self.policy.low_watermark + 1
            mostly_dead = desc.dead_bytes >= self.policy.idle_dead_fraction * self._record_bytes(desc)
            if not (low or mostly_dead):
                return None
            self._clean(victim)
            return victim

    def _record_bytes(self, desc) -> int:
        """Bytes of records in a closed set, excluding its digest."""
        if desc.digest_bytes is None:
            found = read_digest(self.table, desc)
            desc.digest_bytes = found[1].digest_length * desc.width if found else 0
        return desc.write_offset * desc.width - desc.digest_bytes

    def run_background(self, policy: GcPolicy | None = None, stop: threading.Event | None = None) -> None:
        """Loop until ``stop`` is set.  Errors are logged and retried."""
        if policy is not None:
            self.policy = policy
        stop = stop or self._stop
        while not stop.is_set():
            try:
                did = self.collect_once()
            except OutOfSpace:
                did = None
            except Exception as e:  # keep cleaning; surface the error to the caller
                if self.store.table.drives.faults.crashed:
                    return
                logger.exception("background GC step failed")
                self.errors.append(e)
                did = None
            if did is None:
                stop.wait(self.policy.idle_interval)

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self.run_background, name="gc", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None


# ---------------------------------------------------------------------------
# ledger verification

def recompute_dead(store) -> dict[int, int]:
    """Dead bytes per zone set from a full scan, independent of the ledger.

    Dead means a segment the index does not reference, or a tombstone older
    than the last complete snapshot.
    """
    table = store.table
    horizon = _horizon(store)
    live: dict[tuple, int] = {}
    for key, value in store.index.items():
        live[(value.zoneset_id, value.offset)] = value.length
    out = {}
    for z, desc in table.sets.items():
        if desc.state in (ZoneSetState.EMPTY, ZoneSetState.AVAILABLE, ZoneSetState.INDEX):
            out[z] = 0
            continue
        dead = 0
        for e in set_entries(table, desc)[0]:
            if e.record_type == RecordType.SEGMENT:
                if live.get((z, e.offset)) != e.segment_length:
                    dead += table.footprint(e.segment_length)
            elif e.entry_timestamp < horizon:
                dead += table.tombstone_bytes
        out[z] = dead
    return out


def ledger_mismatches(store) -> dict[int, tuple[int, int]]:
    """Sets whose ledger disagrees with a full scan: {id: (ledger, scanned)}.

    Quiesces the store for the duration of the check.
    """
    with store.gate.write():
        store.flush()
        scanned = recompute_dead(store)
        return {z: (store.table.sets[z].dead_bytes, d) for z, d in scanned.items()
                if store.table.sets[z].dead_bytes != d}
