import subprocess
import sys

import pytest

from zonestore.bench.cli import main
from zonestore.store import Store

from conftest import oid, payload

GEOM = ["--drives", "6", "--zones", "16", "--zone-size", "1MiB", "--segment-size", "256KiB"]


@pytest.fixture
def root(tmp_path):
    r = tmp_path / "store"
    assert main(["--root", str(r), "init", *GEOM]) == 0
    return r


def test_init_creates_tree(tmp_path, capsys):
    r = tmp_path / "s"
    assert main(["--root", str(r), "init", "--drives", "6", "--zones", "64",
                 "--zone-size", "8MiB", "--width", "6"]) == 0
    assert "62 zone sets" in capsys.readouterr().out
    assert (r / "store.conf").is_file()
    assert sorted(p.name for p in (r / "drives").glob("*.dat")) == \
        [f"drive{i}.dat" for i in range(6)]
    s = Store.open(r, read_only=True)
    assert s.config.zones == 64 and s.config.zone_size == 8 << 20
    s.close()


def test_put_get_stat_delete(root, tmp_path, capsysbinary):
    data = payload(1, 700_000)
    src = tmp_path / "in.bin"
    src.write_bytes(data)
    r = ["--root", str(root)]
    assert main([*r, "put", "--id", oid(1), "--file", str(src)]) == 0
    assert b"version=" in capsysbinary.readouterr().out
    out = tmp_path / "out.bin"
    assert main([*r, "get", "--id", oid(1), "--out", str(out)]) == 0
    assert out.read_bytes() == data
    capsysbinary.readouterr()
    assert main([*r, "get", "--id", oid(1)]) == 0
    assert capsysbinary.readouterr().out == data
    assert main([*r, "stat", "--id", oid(1)]) == 0
    assert b"length=700000" in capsysbinary.readouterr().out
    assert main([*r, "delete", "--id", oid(1)]) == 0
    assert main([*r, "delete", "--id", oid(1)]) == 1
    assert main([*r, "get", "--id", oid(1)]) == 1


def test_usage_errors_exit_2(root):
    with pytest.raises(SystemExit) as e:
        main(["--root", str(root), "put", "--id", oid(1)])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    assert main(["--root", str(root), "stat", "--id", "xyz"]) == 2


def test_process_exit_status(root):
    cmd = [sys.executable, "-m", "zonestore.bench.cli", "--root", str(root)]
    assert subprocess.run(cmd + ["stat"], capture_output=True).returncode == 2
    assert subprocess.run(cmd + ["delete", "--id", oid(5)], capture_output=True).returncode == 1
    assert subprocess.run(cmd + ["fsck", "--quick"], capture_output=True).returncode == 0


def test_maintenance_commands(root, tmp_path, capsys):
    r = ["--root", str(root)]
    for i in range(6):
        f = tmp_path / f"{i}.bin"
        f.write_bytes(payload(i, 300_000 + i))
        assert main([*r, "put", "--id", oid(i), "--file", str(f)]) == 0
    assert main([*r, "snapshot"]) == 0
    assert "snapshot_id=" in capsys.readouterr().out
    assert main([*r, "gc"]) == 0
    assert "cleans_completed=" in capsys.readouterr().out
    m = tmp_path / "recover.txt"
    assert main([*r, "recover", "--read-only", "--metrics", str(m)]) == 0
    assert "zonesets_examined" in m.read_text()
    assert main([*r, "fsck"]) == 0
    assert main([*r, "rebuild", "--failed", "2"]) == 0
    assert (root / "drives" / "retired" / "drive2.dat").exists()
    assert main([*r, "fsck"]) == 0
    out = tmp_path / "o.bin"
    assert main([*r, "get", "--id", oid(3), "--out", str(out)]) == 0
    assert out.read_bytes() == payload(3, 300_003)


def test_bench_churn_writes_metrics(tmp_path, capsys):
    out, csv = tmp_path / "m.txt", tmp_path / "m.csv"
    rc = main(["bench", "churn", *GEOM, "--utilization", "0.8", "--seed", "1",
               "--size-model", "fixed:64KiB", "--churn", "0.5",
               "--out", str(out), "--csv", str(csv)])
    assert rc == 0
    kv = dict(line.split("=", 1) for line in out.read_text().splitlines())
    assert kv["phase"] == "churn"
    assert float(kv["wa_data"]) >= 1.0
    assert kv["accounting_gap"] == "0"
    rows = csv.read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("phase,")


def test_bench_recovery_fit(tmp_path):
    out = tmp_path / "r.txt"
    rc = main(["bench", "recovery", *GEOM, "--size-model", "fixed:64KiB", "--points", "3",
               "--step", "2MiB", "--interval", "4MiB", "--out", str(out),
               "--csv", str(tmp_path / "r.csv")])
    assert rc == 0
    kv = dict(line.split("=", 1) for line in out.read_text().splitlines())
    assert "r_squared" in kv and "slope" in kv
