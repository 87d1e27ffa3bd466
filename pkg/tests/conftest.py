import hashlib
import random

import pytest

from zonestore.store import Store, StoreConfig

KiB = 1 << 10
MiB = 1 << 20


def small_config(**kw) -> StoreConfig:
    """Six 16-zone drives of 1MiB zones: fast, but large enough to exercise GC."""
    base = dict(drives=6, width=6, zones=16, zone_size=1 * MiB, block_size=4096,
                segment_size=256 * KiB, min_segment=64 * KiB, pool_target=4)
    base.update(kw)
    return StoreConfig(**base)


def oid(n: int) -> str:
    return f"{n:064x}"


def payload(seed: int, size: int) -> bytes:
    return random.Random(seed).randbytes(size)


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@pytest.fixture
def store(tmp_path):
    s = Store.create(tmp_path / "store", small_config())
    yield s
    if not s.closed:
        s.close(snapshot=False)


@pytest.fixture
def make_store(tmp_path):
    opened = []

    def make(name="store", **kw):
        s = Store.create(tmp_path / name, small_config(**kw))
        opened.append(s)
        return s

    yield make
    for s in opened:
        if not s.closed:
            try:
                s.close(snapshot=False)
            except Exception:
                pass



# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
