"""Erasure coding for zone-set stripes.

Only RAID-4 (k data shards plus one dedicated XOR parity shard, stored last)
ships today; :class:`ErasureCode` is the seam for other codes.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np


class CodecError(Exception):
    pass


class UnequalShardLengths(CodecError):
    pass


class TooManyMissing(CodecError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    data_shards: int
    parity_shards: int = 1
    shard_size: int = 0

    def __post_init__(self):
        if self.data_shards < 1:
            raise ValueError("data_shards must be >= 1")
        if self.parity_shards < 0:
            raise ValueError("parity_shards must be >= 0")

    @property
    def width(self) -> int:
        return self.data_shards + self.parity_shards


@dataclass
class ShardSet:
    """k+m shards; ``None`` marks a missing one."""

    shards: list = field(default_factory=list)

    @property
    def present_count(self) -> int:
        return sum(s is not None for s in self.shards)

    @property
    def missing(self) -> list[int]:
        return [i for i, s in enumerate(self.shards) if s is None]


def xor_blocks(buffers) -> bytes:
    """Byte-wise XOR of equal-length buffers."""
    buffers = list(buffers)
    n = len(buffers[0])
    if any(len(b) != n for b in buffers):
        raise UnequalShardLengths("shards differ in length")
    if n == 0:
        return b""
    dtype = np.uint64 if n % 8 == 0 else np.uint8
    acc = np.frombuffer(buffers[0], dtype=dtype).copy()
    for b in buffers[1:]:
        np.bitwise_xor(acc, np.frombuffer(b, dtype=dtype), out=acc)
    return acc.tobytes()


class ErasureCode(abc.ABC):
    def __init__(self, config: CodecConfig):
        self.config = config

    @abc.abstractmethod
    def encode(self, data) -> list[bytes]:
        """Parity shards for ``k`` equal-length data shards."""

    @abc.abstractmethod
    def reconstruct(self, shards: ShardSet) -> list[bytes]:
        """Return all k+m shards, rebuilding the missing ones."""

    def verify(self, shards: ShardSet) -> bool:
        k = self.config.data_shards
        if shards.present_count != self.config.width:
            raise TooManyMissing("verify needs every shard")
        return [bytes(p) for p in self.encode(shards.shards[:k])] == \
            [bytes(p) for p in shards.shards[k:]]


class Raid4(ErasureCode):
    def __init__(self, config: CodecConfig):
        if config.parity_shards != 1:
            raise ValueError("RAID-4 has exactly one parity shard")
        super().__init__(config)

    def encode(self, data) -> list[bytes]:
        data = list(data)
        if len(data) != self.config.data_shards:
            raise ValueError(f"expected {self.config.data_shards} data shards, got {len(data)}")
        return [xor_blocks(data)]

    def reconstruct(self, shards: ShardSet) -> list[bytes]:
        width = self.config.width
        if len(shards.shards) != width:
            raise ValueError(f"expected {width} shards, got {len(shards.shards)}")
        missing = shards.missing
        if len(missing) > 1:
            raise TooManyMissing(f"{len(missing)} shards missing, RAID-4 tolerates 1")
        out = [None if s is None else bytes(s) for s in shards.shards]
        if missing:
            out[missing[0]] = xor_blocks(s for s in out if s is not None)
        return out


def codec_for(config: CodecConfig) -> ErasureCode:
    if config.parity_shards == 1:
        return Raid4(config)
    raise NotImplementedError(f"no codec for {config.parity_shards} parity shards")


def encode(config: CodecConfig, data) -> list[bytes]:
    return codec_for(config).encode(data)


def reconstruct(config: CodecConfig, shards: ShardSet) -> list[bytes]:
    return codec_for(config).reconstruct(shards)


def verify(config: CodecConfig, shards: ShardSet) -> bool:
    return codec_for(config).verify(shards)
