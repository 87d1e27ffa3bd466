"""Experiment phases: fill, read, churn and crash-recovery timing."""

from __future__ import annotations

import gc
import logging
import random
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from crc32c import crc32c

from ..layout import digest_entry_size, round_up
from ..store import Store, StoreConfig
from ..zbd import FaultInjector
from .metrics import Probe, RunMetrics
from .workload import OpStream, PayloadPool, ShadowEntry, ShadowMap, WorkloadConfig

logger = logging.getLogger(__name__)


class ValidationError(AssertionError):
    """The store disagreed with the shadow oracle."""


def object_cost(config: StoreConfig):
    """Raw bytes an object of ``n`` bytes occupies: markers, padded fragments and digest entries.

    Segmentation is taken at the nominal segment size.
    """
    bs, k, width = config.block_size, config.width - 1, config.width
    per_record = width * (bs + digest_entry_size(width))

    def cost(n: int) -> int:
        total = 0
        while True:
            seg = min(n, config.segment_size)
            total += per_record + width * round_up(-(-seg // k), bs)
            n -= seg
            if n <= 0:
                return total
    return cost


def data_capacity(config: StoreConfig) -> int:
    """Raw bytes of the zone sets available to live data.

    Held back: the sets GC keeps free, one set for the index snapshot and one
    partially filled open set.
    """
    held = config.gc_low_watermark + 2
    return max(config.zoneset_count - held, 1) * config.width * config.zone_size


@dataclass
class Harness:
    """A store plus the oracle and op stream driving it."""

    store: Store
    workload: WorkloadConfig
    shadow: ShadowMap = field(default_factory=ShadowMap)
    stream: OpStream | None = None
    pool: PayloadPool | None = None
    _held: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        cfg = self.store.config
        if self.stream is None:
            self.stream = OpStream(self.workload, data_capacity(cfg), object_cost(cfg))
        if self.pool is None:
            self.pool = PayloadPool(self.workload.seed, self.workload.size_model.max)

    def apply(self, op) -> None:
        store = self.store
        if op.kind == "put":
            payload = self.pool.payload(op.payload_seed, op.size)
            self.shadow.begin(op.object_id, ShadowEntry(None, crc32c(payload), op.size))
            version = store.put(op.object_id, payload)
            self.shadow.put(op.object_id, version, payload)
        else:
            self.shadow.begin(op.object_id, None)
            store.delete(op.object_id)
            self.shadow.delete(op.object_id)

    def run(self, until_phase: str | None = None, max_bytes: int | None = None) -> int:
        """Apply ops until the stream moves past ``until_phase`` or ``max_bytes`` are PUT."""
        put = 0
        threads = self.workload.thread_count
        if threads == 1:
            for op in self.ops(until_phase):
                self.apply(op)
                put += op.size
                if max_bytes is not None and put >= max_bytes:
                    break
            return put
        # concurrent issue; a DELETE waits for the PUT of the same object
        inflight = {}
        with ThreadPoolExecutor(threads) as ex:
            for op in self.ops(until_phase):
                prior = inflight.pop(op.object_id, None)
                if prior is not None:
                    prior.result()
                inflight[op.object_id] = ex.submit(self._apply_concurrent, op)
                if len(inflight) > 4 * threads:
                    for oid in list(inflight)[:threads]:
                        inflight.pop(oid).result()
                put += op.size
                if max_bytes is not None and put >= max_bytes:
                    break
            for f in inflight.values():
                f.result()
        return put

    def _apply_concurrent(self, op) -> None:
        store = self.store
        if op.kind == "put":
            payload = self.pool.payload(op.payload_seed, op.size)
            version = store.put(op.object_id, payload)
            self.shadow.put(op.object_id, version, payload)
        else:
            store.delete(op.object_id)
            self.shadow.delete(op.object_id)

    def _next_op(self):
        if self._held is not None:
            op, self._held = self._held, None
            return op
        return next(self.stream, None)

    def ops(self, until_phase: str | None = None):
        """Ops from the stream, stopping (without consuming) at the first op of a later phase."""
        while (op := self._next_op()) is not None:
            if until_phase is not None and op.phase != until_phase:
                self._held = op
                return
            yield op

    def validate(self, *, read: bool = True) -> None:
        store = self.store
        problems = self.shadow.mismatches(store.index, store.get if read else None)
        if problems:
            raise ValidationError(f"{len(problems)} mismatches, first: {problems[0]}")


def run_fill(harness: Harness) -> RunMetrics:
    """PUT new objects until the live footprint reaches the target utilization."""
    probe = Probe(harness.store)
    t0 = time.perf_counter()
    harness.run(until_phase="fill")
    return probe.finish("fill", wall_time=time.perf_counter() - t0)


def run_read(harness: Harness, count: int | None = None, seed: int = 0) -> RunMetrics:
    """GET random live objects in full and check them against the oracle."""
    store = harness.store
    probe = Probe(store)
    t0 = time.perf_counter()
    oids = sorted(harness.shadow.objects)
    rng = random.Random(seed)
    picks = oids if count is None else [rng.choice(oids) for _ in range(count)] if oids else []
    nbytes = 0
    for oid in picks:
        version, data = store.get(oid)
        want = harness.shadow.objects[oid]
        if (version, len(data), crc32c(data)) != (want.version, want.length, want.checksum):
            raise ValidationError(f"{oid.hex()}: read mismatch")
        nbytes += len(data)
    return probe.finish("read", read_bytes=nbytes, wall_time=time.perf_counter() - t0)


def run_churn(harness: Harness) -> tuple[RunMetrics, RunMetrics]:
    """Fill, then PUT ``total_ingest`` bytes deleting random objects to hold utilization.

    Returns ``(fill, churn)`` metrics; the churn phase measures steady-state
    write amplification.
    """
    fill = run_fill(harness)
    probe = Probe(harness.store)
    t0 = time.perf_counter()
    for op in harness.ops():
        harness.apply(op)
    churn = probe.finish("churn", wall_time=time.perf_counter() - t0)
    return fill, churn


# ---------------------------------------------------------------------------
# recovery timing

@dataclass
class RecoveryPoint:
    crash_bytes: int
    sets_examined: int
    wall_time: float
    segments_replayed: int
    snapshot_source: str

    def to_dict(self) -> dict:
        return {"crash_bytes": self.crash_bytes, "sets_examined": self.sets_examined,
                "wall_time": round(self.wall_time, 6),
                "segments_replayed": self.segments_replayed,
                "snapshot_source": self.snapshot_source}


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares ``(slope, intercept, r_squared)``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot else 1.0
    return float(slope), float(intercept), r2


def _time_recovery(d: Path, config: StoreConfig) -> tuple[float, object]:
    from ..index import FlashIndex
    from ..recovery import recover
    from ..zbd import DriveArray
    drives = DriveArray.open(d / "drives", config.zones, config.zone_size,
                             config.block_size, FaultInjector())
    # as timeit does: keep collector pauses out of the measurement
    gc.disable()
    try:
        t0 = time.perf_counter()
        _, _, report = recover(drives, FlashIndex(d / "flash"),
                               superblock_zones=config.superblock_zones, read_only=True)
        elapsed = time.perf_counter() - t0
    finally:
        gc.enable()
        drives.close()
    return elapsed, report


def run_recovery_bench(root, config: StoreConfig, workload: WorkloadConfig,
                       snapshot_interval: int, crash_points: list[int], *,
                       repeats: int = 7) -> list[RecoveryPoint]:
    """For each crash point: fill, snapshot, PUT ``crash_point`` more bytes, crash, recover.

    ``snapshot_interval`` is the client bytes written before the snapshot.
    All crashed stores are built first; recovery is then timed read-only in
    ``repeats`` round-robin passes over them and the fastest run of each kept.
    Finally each store is recovered for real and checked against its oracle.
    """
    root = Path(root)
    built = []
    for i, crash in enumerate(crash_points):
        d = root / f"point-{i}"
        shutil.rmtree(d, ignore_errors=True)
        store = Store.create(d, config)
        h = Harness(store, workload)
        h.run(max_bytes=snapshot_interval)
        store.snapshot()
        if crash:
            h.run(max_bytes=crash)
        store.flush()
        store.abandon()
        built.append((d, crash, h))
    best: list[RecoveryPoint | None] = [None] * len(built)
    for _ in range(repeats):
        for i, (d, crash, _) in enumerate(built):
            elapsed, report = _time_recovery(d, config)
            if best[i] is None or elapsed < best[i].wall_time:
                best[i] = RecoveryPoint(crash, report.zonesets_examined, elapsed,
                                        report.segments_replayed, report.snapshot_source)
    for (d, crash, h), point in zip(built, best):
        recovered = Store.open(d)
        h.store = recovered
        h.validate()
        recovered.close(snapshot=False)
        logger.info("crash point %d: %s", crash, point.to_dict())
    return best
