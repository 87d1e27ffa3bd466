"""Seeded workload generation and the shadow oracle used to validate runs."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np
from crc32c import crc32c

MiB = 1 << 20
KiB = 1 << 10


@dataclass(frozen=True)
class FixedSize:
    bytes: int

    def __post_init__(self):
        if self.bytes <= 0:
            raise ValueError("object size must be positive")

    @property
    def max(self) -> int:
        return self.bytes

    def sample(self, rng: random.Random) -> int:
        return self.bytes


@dataclass(frozen=True)
class LogNormalSize:
    """Log-normal sizes with the given mode, truncated to ``[min, max]`` by rejection."""

    mode: int
    sigma: float = 1.0
    min: int = 16 * KiB
    max: int = 160 * MiB

    def __post_init__(self):
        if not self.min < self.mode < self.max:
            raise ValueError("need min < mode < max")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def mu(self) -> float:
        # mode of a log-normal is exp(mu - sigma^2)
        return math.log(self.mode) + self.sigma ** 2

    def sample(self, rng: random.Random) -> int:
        while True:
            x = int(rng.lognormvariate(self.mu, self.sigma))
            if self.min <= x <= self.max:
                return x


SizeModel = Union[FixedSize, LogNormalSize]


def size_model_from_text(text: str) -> SizeModel:
    """``fixed:16KiB`` or ``lognormal:2MiB[:sigma[:min[:max]]]``."""
    from ..store import parse_size
    kind, _, rest = text.partition(":")
    parts = [p for p in rest.split(":") if p]
    if kind == "fixed" and len(parts) == 1:
        return FixedSize(parse_size(parts[0]))
    if kind == "lognormal" and 1 <= len(parts) <= 4:
        kw = {"mode": parse_size(parts[0])}
        if len(parts) > 1:
            kw["sigma"] = float(parts[1])
        if len(parts) > 2:
            kw["min"] = parse_size(parts[2])
        if len(parts) > 3:
            kw["max"] = parse_size(parts[3])
        return LogNormalSize(**kw)
    raise ValueError(f"bad size model {text!r}")


@dataclass
class WorkloadConfig:
    size_model: SizeModel = field(default_factory=lambda: LogNormalSize(2 * MiB))
    target_utilization: float = 0.8
    # client bytes to PUT after the fill phase; 0 means fill only
    total_ingest: int = 0
    thread_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.target_utilization < 1:
            raise ValueError("target_utilization must be in (0, 1)")
        if self.total_ingest < 0 or self.thread_count < 1:
            raise ValueError("total_ingest >= 0 and thread_count >= 1 required")


@dataclass(frozen=True)
class Op:
    kind: str  # "put" or "delete"
    object_id: bytes
    size: int = 0
    payload_seed: int = 0
    phase: str = "fill"


class PayloadPool:
    """Deterministic payloads: windows into one seeded random buffer."""

    def __init__(self, seed: int, max_size: int):
        self.size = max(max_size + MiB, 8 * MiB)
        self.buf = np.random.default_rng(seed).bytes(self.size)
        self.view = memoryview(self.buf)

    def payload(self, payload_seed: int, size: int) -> memoryview:
        off = payload_seed % (self.size - size + 1)
        return self.view[off:off + size]


class OpStream:
    """Reproducible PUT/DELETE stream.

    PUTs create fresh objects.  Once the live cost reaches
    ``target_utilization * capacity`` every PUT is preceded by uniformly random
    deletes that free at least its cost.  ``cost`` maps an object size to the
    space it occupies (identity by default).
    """

    def __init__(self, config: WorkloadConfig, capacity: int, cost=None):
        self.config = config
        self.capacity = capacity
        self.cost = cost or (lambda n: n)
        self.rng = random.Random(config.seed)
        self.live: list[bytes] = []
        self._pos: dict[bytes, int] = {}
        self._sizes: dict[bytes, int] = {}
        self.live_cost = 0
        self.churned = 0
        self.phase = "fill"
        self._next_size: int | None = None

    @property
    def limit(self) -> float:
        return self.config.target_utilization * self.capacity

    def _new_id(self) -> bytes:
        while True:
            oid = self.rng.getrandbits(256).to_bytes(32, "big")
            if oid not in self._sizes and any(oid):
                return oid

    def _remove(self, oid: bytes) -> None:
        i = self._pos.pop(oid)
        last = self.live.pop()
        if last != oid:
            self.live[i] = last
            self._pos[last] = i
        self.live_cost -= self.cost(self._sizes.pop(oid))

    def __iter__(self) -> Iterator[Op]:
        return self

    def __next__(self) -> Op:
        if self.phase == "done":
            raise StopIteration
        if self._next_size is None:
            self._next_size = self.config.size_model.sample(self.rng)
        size = self._next_size
        c = self.cost(size)
        if self.phase == "fill" and self.live_cost + c > self.limit:
            self.phase = "churn"
        if self.phase == "churn":
            if self.churned >= self.config.total_ingest:
                self.phase = "done"
                raise StopIteration
            # deletes are emitted one at a time ahead of the PUT that needs the room
            if self.live and self.live_cost + c > self.limit:
                oid = self.live[self.rng.randrange(len(self.live))]
                self._remove(oid)
                return Op("delete", oid, phase="churn")
            self.churned += size
        self._next_size = None
        oid = self._new_id()
        self._pos[oid] = len(self.live)
        self.live.append(oid)
        self._sizes[oid] = size
        self.live_cost += c
        return Op("put", oid, size, self.rng.getrandbits(63), self.phase)


def generate(config: WorkloadConfig, capacity: int, cost=None) -> OpStream:
    return OpStream(config, capacity, cost)


@dataclass(frozen=True)
class ShadowEntry:
    version: int
    checksum: int
    length: int


class ShadowMap:
    """Ground truth for acknowledged operations.

    ``pending`` holds the single operation in flight when a crash hits; its
    outcome may go either way.
    """

    def __init__(self):
        self.objects: dict[bytes, ShadowEntry] = {}
        self.pending: tuple[bytes, ShadowEntry | None] | None = None

    def begin(self, oid: bytes, outcome: ShadowEntry | None) -> None:
        self.pending = (oid, outcome)

    def put(self, oid: bytes, version: int, payload) -> None:
        self.objects[oid] = ShadowEntry(version, crc32c(payload), len(payload))
        self.pending = None

    def delete(self, oid: bytes) -> None:
        self.objects.pop(oid, None)
        self.pending = None

    def __len__(self) -> int:
        return len(self.objects)

    def __eq__(self, other) -> bool:
        return isinstance(other, ShadowMap) and self.objects == other.objects

    def projected(self, index) -> dict[bytes, tuple[int, int]]:
        """The store's view as ``{oid: (version, length)}`` of latest complete versions."""
        out = {}
        for oid in index.object_ids():
            v = index.latest_complete_version(oid)
            if v is None:
                continue
            n = sum(val.length for k, val in index.lookup_object(oid) if k.version == v)
            out[oid] = (v, n)
        return out

    def mismatches(self, index, read=None) -> list[str]:
        """Differences between the store and this oracle.

        ``read(oid) -> (version, bytes)`` additionally verifies full-object checksums.
        """
        seen = self.projected(index)
        problems = []
        expected = dict(self.objects)
        alt = None
        if self.pending is not None:
            oid, outcome = self.pending
            alt = dict(expected)
            if outcome is None:
                alt.pop(oid, None)
            else:
                alt[oid] = outcome
        for oid in set(expected) | set(seen) | (set(alt) if alt else set()):
            choices = [expected.get(oid)] + ([alt.get(oid)] if alt is not None else [])
            got = seen.get(oid)
            ok = any((c is None and got is None) or
                     (c is not None and got is not None and got[1] == c.length and
                      (c.version is None or got[0] == c.version)) for c in choices)
            if not ok:
                problems.append(f"{oid.hex()}: store has {got}, expected one of {choices}")
                continue
            if got is not None and read is not None:
                version, data = read(oid)
                crc = crc32c(data)
                if not any(c is not None and c.checksum == crc and len(data) == c.length
                           for c in choices):
                    problems.append(f"{oid.hex()}: checksum mismatch at version {version}")
        return problems
