import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from conftest import KiB, oid, payload, small_config
from zonestore.gc import GcPolicy, ledger_mismatches, recompute_dead, select_victim
from zonestore.store import NotFound, Store
from zonestore.zbd import CrashInjected
from zonestore.zoneset import ZoneSetState

MiB = 1 << 20


def close_writers(store):
    for w in store.all_writers():
        w.close()


def location(store, n):
    (_, v), = store.index.lookup_object(bytes.fromhex(oid(n)))
    return v


def test_select_victim_examples(store):
    table = store.table
    for z in (0, 1, 2):
        table.sets[z].state = ZoneSetState.CLOSED
    assert select_victim(table, {0: 10 * MiB, 1: 30 * MiB, 2: 5 * MiB}) == 1
    assert select_victim(table, {0: 0, 1: 0, 2: 0}) is None
    assert select_victim(table, {0: 10 * MiB, 1: 10 * MiB, 2: 0}) == 0
    for z in (0, 1, 2):
        table.sets[z].state = ZoneSetState.AVAILABLE


def test_clean_fully_dead_set_only_trims(store):
    for n in range(4):
        store.put(oid(n), payload(n, 60 * KiB))
    z = location(store, 0).zoneset_id
    close_writers(store)
    for n in range(4):
        store.delete(oid(n))
    close_writers(store)
    written = store.table.sets[z].write_offset * store.table.width
    relocated = store.gc.metrics.segments_relocated
    assert store.gc.clean_zoneset(z) == written
    assert store.gc.metrics.segments_relocated == relocated
    assert store.table.sets[z].state == ZoneSetState.EMPTY


def test_clean_relocates_live_segments(store):
    objs = {n: payload(n, 60 * KiB) for n in range(5)}
    for n, data in objs.items():
        store.put(oid(n), data)
    z = location(store, 0).zoneset_id
    close_writers(store)
    for n in (0, 2, 4):
        store.delete(oid(n))
        del objs[n]
    before = store.gc.metrics.segments_relocated
    store.gc.clean_zoneset(z)
    assert store.gc.metrics.segments_relocated - before == 2
    assert store.table.sets[z].state == ZoneSetState.EMPTY
    for n, data in objs.items():
        assert location(store, n).zoneset_id != z
        assert store.get(oid(n))[1] == data
    assert ledger_mismatches(store) == {}


def test_read_of_location_trimmed_by_gc_follows_index(store):
    data = payload(7, 90 * KiB)
    store.put(oid(7), data)
    (key, stale), = store.index.lookup_object(bytes.fromhex(oid(7)))
    close_writers(store)
    store.gc.clean_zoneset(stale.zoneset_id)
    # a reader that looked the entry up before the clean still gets the data
    assert store._read_entry(key, stale) == data
    store.delete(oid(7))
    with pytest.raises(NotFound):
        store._read_entry(key, stale)


def test_clean_rejects_open_sets(store):
    store.put(oid(1), b"x")
    with pytest.raises(ValueError):
        store.gc.clean_zoneset(location(store, 1).zoneset_id)


def test_crash_mid_clean_then_reclean(tmp_path):
    s = Store.create(tmp_path / "s", small_config(durable_acks=True))
    objs = {n: payload(n, 60 * KiB) for n in range(8)}
    for n, data in objs.items():
        s.put(oid(n), data)
    z = location(s, 0).zoneset_id
    close_writers(s)
    for n in (1, 3):
        s.delete(oid(n))
        del objs[n]
    close_writers(s)
    # let a few relocations land, then crash before the victim is trimmed
    s.table.drives.faults.arm(3 * 6 * (4096 + 12 * 1024))
    with pytest.raises(CrashInjected):
        s.gc.clean_zoneset(z)
    s.abandon()
    r = Store.open(tmp_path / "s")
    for n, data in objs.items():
        assert r.get(oid(n))[1] == data
    victim = r.table.sets[z]
    assert victim.state in (ZoneSetState.CLOSED, ZoneSetState.INDEXED)
    r.gc.clean_zoneset(z)
    for n, data in objs.items():
        assert r.get(oid(n))[1] == data
    for n in (1, 3):
        with pytest.raises(NotFound):
            r.get(oid(n))
    assert ledger_mismatches(r) == {}
    r.close()


def test_tombstones_survive_clean_and_crash(tmp_path):
    s = Store.create(tmp_path / "s", small_config(durable_acks=True))
    for n in range(6):
        s.put(oid(n), payload(n, 40 * KiB))
    s.snapshot()
    for n in range(3):
        s.delete(oid(n))
    # every set holding a tombstone is cleaned, so the tombstones are carried forward
    close_writers(s)
    for z in s.table.ids_in(ZoneSetState.CLOSED, ZoneSetState.INDEXED):
        s.gc.clean_zoneset(z)
    s.flush()
    s.abandon()
    r = Store.open(tmp_path / "s")
    for n in range(3):
        with pytest.raises(NotFound):
            r.get(oid(n))
    for n in range(3, 6):
        assert r.get(oid(n))[1] == payload(n, 40 * KiB)
    r.close()


def test_background_respects_watermark(tmp_path):
    s = Store.create(tmp_path / "s", small_config())
    for n in range(10):
        s.put(oid(n), payload(n, 60 * KiB))
    close_writers(s)
    for n in range(0, 10, 2):
        s.delete(oid(n))
    assert s.gc.collect_once() is None
    s.gc.policy = GcPolicy(low_watermark=len(s.table.sets))
    stop = threading.Event()
    t = threading.Thread(target=s.gc.run_background, args=(None, stop))
    t.start()
    for _ in range(200):
        if s.gc.metrics.cleans_completed:
            break
        stop.wait(0.01)
    stop.set()
    t.join()
    assert s.gc.metrics.cleans_completed >= 1
    for n in range(1, 10, 2):
        assert s.get(oid(n))[1] == payload(n, 60 * KiB)
    assert ledger_mismatches(s) == {}
    s.close(snapshot=False)


def test_make_space_restores_watermark(tmp_path):
    s = Store.create(tmp_path / "s", small_config())
    n = 0
    while s.table.free_count() > 3:
        s.put(oid(n), payload(n, 100 * KiB))
        n += 1
    for i in range(0, n, 3):
        s.put(oid(i), payload(i, 100 * KiB))
    for i in range(1, n, 3):
        s.delete(oid(i))
    close_writers(s)
    s.gc.make_space(s.table.free_count() + 2)
    assert ledger_mismatches(s) == {}
    s.close(snapshot=False)


def test_liveness_everything_dead_returns_to_empty(store):
    for n in range(30):
        store.put(oid(n), payload(n, 80 * KiB))
    for n in range(30):
        store.delete(oid(n))
    store.snapshot()
    close_writers(store)
    while store.gc.collect_once() is not None:
        pass
    used = store.table.ids_in(ZoneSetState.CLOSED, ZoneSetState.INDEXED, ZoneSetState.OPEN)
    assert all(store.table.sets[z].write_offset == 0 or z in store.table.writers for z in used)
    assert len(store.index) == 0


gc_ops = st.lists(st.tuples(st.sampled_from(["put", "put", "delete", "gc", "snap"]),
                            st.integers(0, 11), st.integers(0, 200 * KiB)),
                  min_size=5, max_size=40)


@settings(max_examples=15, deadline=None)
@given(gc_ops)
def test_ledger_matches_full_scan(tmp_path_factory, sequence):
    s = Store.create(tmp_path_factory.mktemp("g") / "s", small_config(snapshot_tombstone_fraction=0))
    shadow = {}
    for i, (op, n, size) in enumerate(sequence):
        if op == "put":
            shadow[n] = payload(i, size)
            s.put(oid(n), shadow[n])
        elif op == "delete":
            s.delete(oid(n))
            shadow.pop(n, None)
        elif op == "snap":
            s.snapshot()
        else:
            close_writers(s)
            s.gc.make_space(s.table.free_count() + 1)
        assert ledger_mismatches(s) == {}
    for n, data in shadow.items():
        assert s.get(oid(n))[1] == data
    assert recompute_dead(s) == {z: d.dead_bytes for z, d in s.table.sets.items()}
    s.close(snapshot=False)
