import random

import pytest
from hypothesis import given, settings, strategies as st

from zonestore.layout import RecordType, decode_lmb
from zonestore.zbd import DriveArray
from zonestore.zoneset import (BadState, DonorConflict, OutOfSpace, SegmentMeta, SegmentTooLarge,
                               SuperblockWriter, ZoneSetState, append_segment, append_tombstone,
                               close_zoneset, init_table, open_zoneset, read_digest,
                               read_segment, read_superblocks, replace_zone, replenish_available,
                               scan_records, trim_zoneset)

MiB = 1 << 20
BS = 4096


def make_table(path, drives=6, zones=64, zone_size=8 * MiB, block_size=BS):
    arr = DriveArray.create(path, drives, zones, zone_size, block_size)
    table = init_table(arr, drives, 2)
    table.sb_writer = SuperblockWriter(arr, 2, 3)
    return table


def meta(n, seg=0, complete=True, ts=1):
    return SegmentMeta(bytes([n]) * 32, n, seg, complete, ts)


def member_wps(table, z):
    return set(table.write_pointers(table.sets[z]).values())


def test_init_table_counts_and_guards(tmp_path):
    table = make_table(tmp_path / "a")
    assert len(table) == 62
    assert all(d.state == ZoneSetState.EMPTY for d in table.sets.values())
    assert all(len({drv for drv, _ in d.members}) == 6 for d in table.sets.values())
    arr = DriveArray.create(tmp_path / "b", 4, 8, MiB)
    with pytest.raises(ValueError):
        init_table(arr, 6, 2)


def test_replenish(tmp_path):
    table = make_table(tmp_path)
    assert len(replenish_available(table, 32)) == 32
    assert table.sb_writer.writes == 1
    assert replenish_available(table, 32) == []
    assert table.sb_writer.writes == 1
    for z in table.ids_in(ZoneSetState.EMPTY)[:-5]:
        table.transition(z, ZoneSetState.AVAILABLE)
        table.transition(z, ZoneSetState.OPEN)
    for z in table.ids_in(ZoneSetState.AVAILABLE):
        table.transition(z, ZoneSetState.OPEN)
    assert len(replenish_available(table, 32)) == 5


def test_open_replenishes_then_runs_out(tmp_path):
    table = make_table(tmp_path, zones=5, zone_size=MiB)
    w = open_zoneset(table, pool_target=1)
    assert w.write_offset == 0 and table.sets[w.zoneset_id].state == ZoneSetState.OPEN
    close_zoneset(w)
    for _ in range(2):
        close_zoneset(open_zoneset(table, pool_target=1))
    with pytest.raises(OutOfSpace):
        open_zoneset(table)


def test_segment_fragment_arithmetic_and_lockstep(tmp_path):
    table = make_table(tmp_path)
    w = open_zoneset(table)
    payload = random.randbytes(10 * MiB)
    a = append_segment(w, meta(1), payload)
    assert table.fragment_length(10 * MiB) == 2 * MiB
    assert w.write_offset == BS + 2 * MiB
    b = append_segment(w, meta(2), payload[:MiB])
    assert b.offset == a.offset + BS + 2 * MiB
    w.flush()
    assert member_wps(table, w.zoneset_id) == {w.write_offset}
    assert read_segment(table, a.zoneset_id, a.offset, a.length) == payload


def test_segment_too_large_leaves_writer_unchanged(tmp_path):
    table = make_table(tmp_path, zones=4, zone_size=MiB)
    w = open_zoneset(table)
    before = w.write_offset
    with pytest.raises(SegmentTooLarge):
        append_segment(w, meta(1), bytes(6 * MiB))
    assert w.write_offset == before
    assert table.sets[w.zoneset_id].pending_digest == []


def test_tombstones(tmp_path):
    table = make_table(tmp_path, zones=4, zone_size=MiB)
    w = open_zoneset(table, durable_acks=True)
    x = bytes([9]) * 32
    _, off1 = append_tombstone(w, x, 100)
    assert member_wps(table, w.zoneset_id) == {BS}
    _, off2 = append_tombstone(w, x, 101)
    assert off2 > off1
    for _, drv, z in table.live_members(table.sets[w.zoneset_id]):
        lmb = decode_lmb(drv.read(z, off1, BS))
        assert (lmb.record_type, lmb.object_id, lmb.version) == (RecordType.TOMBSTONE, x, 100)
    close_zoneset(w)
    entries = read_digest(table, table.sets[w.zoneset_id])[0].entries
    assert [e.version for e in entries] == [100, 101]


def test_close_digest_counts_and_lifecycle(tmp_path):
    table = make_table(tmp_path, zones=5, zone_size=MiB)
    w = open_zoneset(table)
    for n in range(3):
        append_segment(w, meta(n), random.randbytes(50_000))
    append_tombstone(w, bytes(32), 7)
    close_zoneset(w)
    desc = table.sets[w.zoneset_id]
    assert desc.state == ZoneSetState.CLOSED
    assert read_digest(table, desc)[0].entry_count == 4
    with pytest.raises(BadState):
        append_segment(w, meta(9), b"x")
    empty = open_zoneset(table)
    close_zoneset(empty)
    assert read_digest(table, table.sets[empty.zoneset_id])[0].entry_count == 0
    assert table.sets[empty.zoneset_id].state == ZoneSetState.CLOSED


def test_trim(tmp_path):
    table = make_table(tmp_path, zones=4, zone_size=MiB)
    w = open_zoneset(table)
    append_segment(w, meta(1), bytes(10_000))
    with pytest.raises(BadState):
        trim_zoneset(table, w.zoneset_id)
    close_zoneset(w)
    trim_zoneset(table, w.zoneset_id)
    assert member_wps(table, w.zoneset_id) == {0}
    assert table.sets[w.zoneset_id].state == ZoneSetState.EMPTY


def test_replace_zone(tmp_path):
    table = make_table(tmp_path, zones=6, zone_size=MiB)
    spare = table.drives.add_drive()
    with pytest.raises(DonorConflict):
        replace_zone(table, 0, 2, (4, 5))
    replace_zone(table, 0, 2, (spare.drive_id, 2))
    assert table.sets[0].members[2] == (spare.drive_id, 2)
    assert table.sets[0].zoneset_id == 0


def test_superblock_replicas_and_sequence(tmp_path):
    table = make_table(tmp_path, zones=4, zone_size=64 * 1024)
    for _ in range(40):
        table.write_superblock()
    found = read_superblocks(table.drives, 2)
    assert {d for _, d, _ in found} == {0, 1, 2}
    assert max(sb.sequence for sb, _, _ in found) == 40


@settings(max_examples=25, deadline=None)
@given(ops=st.lists(st.one_of(st.integers(0, 300_000), st.none()), min_size=1, max_size=25),
       bs=st.sampled_from([512, 4096]))
def test_digest_matches_scan_and_space_accounting(tmp_path_factory, ops, bs):
    table = make_table(tmp_path_factory.mktemp("zs"), zones=3, zone_size=MiB, block_size=bs)
    w = open_zoneset(table, fifo_bytes=64 * 1024)
    rng = random.Random(len(ops))
    for i, size in enumerate(ops):
        try:
            if size is None:
                append_tombstone(w, bytes([i]) * 32, i, i)
            else:
                append_segment(w, meta(i % 256, ts=i), rng.randbytes(size))
        except SegmentTooLarge:
            continue
        w.flush()
        assert member_wps(table, w.zoneset_id) == {w.write_offset}
    close_zoneset(w)
    desc = table.sets[w.zoneset_id]
    scanned = [r.digest_entry() for r in scan_records(table, desc).records]
    for member in range(desc.width):
        assert read_digest(table, desc, member)[0].entries == scanned
    written = {k: v for k, v in table.stats.snapshot().items() if k != "superblock"}
    assert sum(written.values()) == desc.write_offset * desc.width
    assert member_wps(table, w.zoneset_id) == {desc.write_offset}
