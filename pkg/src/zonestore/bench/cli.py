"""Command-line interface: ``zonestore <command> [options]``.

Exit status is 0 on success, 1 on a store or validation failure and 2 on a
usage error.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

from ..store import NotFound, Store, StoreConfig, StoreError, parse_size
from ..zbd import FaultInjector, FaultPlan
from . import metrics as metrics_mod
from .runner import Harness, linear_fit, run_churn, run_fill, run_read, run_recovery_bench
from .workload import WorkloadConfig, size_model_from_text

logger = logging.getLogger("zonestore")

_GEOMETRY = ("drives", "zones", "zone_size", "block_size", "width")


def _config(args) -> StoreConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if args.config:
        values.update(vars(StoreConfig.from_text(Path(args.config).read_text())))
    for f in fields(StoreConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if "drives" in values and "width" not in values:
        values["width"] = values["drives"]
    return StoreConfig(**values)


def _add_geometry(p: argparse.ArgumentParser) -> None:
    p.add_argument("--drives", type=int)
    p.add_argument("--zones", type=int)
    p.add_argument("--zone-size", dest="zone_size", type=parse_size)
    p.add_argument("--block-size", dest="block_size", type=parse_size)
    p.add_argument("--width", type=int)
    p.add_argument("--segment-size", dest="segment_size", type=parse_size)


def _open(args, **kw) -> Store:
    return Store.open(args.root, **kw)


def cmd_init(args) -> int:
    store = Store.create(args.root, _config(args))
    print(f"initialized {args.root}: {store.config.zoneset_count} zone sets of width "
          f"{store.config.width}")
    store.close(snapshot=False)
    return 0


def cmd_put(args) -> int:
    data = Path(args.file).read_bytes() if args.file != "-" else sys.stdin.buffer.read()
    with _open(args, durable_acks=True) as store:
        version = store.put(args.id, data)
        store.flush()
    print(f"version={version}")
    return 0


def cmd_get(args) -> int:
    store = _open(args, read_only=True)
    try:
        version, data = store.get(args.id)
    finally:
        store.close()
    if args.out:
        Path(args.out).write_bytes(data)
        print(f"version={version}")
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    return 0


def cmd_delete(args) -> int:
    with _open(args, durable_acks=True) as store:
        found = store.delete(args.id)
    print("deleted" if found else "not found")
    return 0 if found else 1


def cmd_stat(args) -> int:
    store = _open(args, read_only=True)
    try:
        st = store.stat(args.id)
    finally:
        store.close()
    print(f"object_id={st.object_id.hex()}\nversion={st.version}\nlength={st.length}\n"
          f"segments={st.segments}")
    return 0


def cmd_gc(args) -> int:
    with _open(args) as store:
        cleaned = 0
        while args.sets is None or cleaned < args.sets:
            if store.gc.collect_once() is None and args.sets is None:
                break
            cleaned += 1
        m = store.gc.metrics
        print(f"cleans_completed={m.cleans_completed}\nbytes_relocated={m.bytes_relocated}\n"
              f"bytes_reclaimed={m.bytes_reclaimed}\nfree_zonesets={store.table.free_count()}")
    return 0


def cmd_snapshot(args) -> int:
    store = _open(args)
    manifest = store.snapshot()
    store.close(snapshot=False)
    print(f"snapshot_id={manifest.snapshot_id}\nlength={manifest.length}\n"
          f"index_sets={','.join(map(str, manifest.index_sets))}")
    return 0


def cmd_recover(args) -> int:
    store = _open(args, read_only=args.read_only)
    report = store.recovery_report
    store.close(snapshot=False)
    print(report.to_text(), end="")
    if args.metrics:
        Path(args.metrics).write_text("".join(f"{k}={v}\n" for k, v in report.to_metrics().items()))
    return 0


def cmd_rebuild(args) -> int:
    from ..recovery import rebuild_after_drive_failure
    faults = FaultInjector(FaultPlan(fail_drive=args.failed))
    store = Store.open(args.root, faults)
    spare = store.table.drives.add_drive()
    report = rebuild_after_drive_failure(store, args.failed, spare.drive_id)
    store.close(snapshot=False)
    retired = Path(args.root) / "drives" / "retired"
    retired.mkdir(exist_ok=True)
    for suffix in (".dat", ".state"):
        src = Path(args.root) / "drives" / f"drive{args.failed}{suffix}"
        if src.exists():
            src.rename(retired / src.name)
    print(report.to_text(), end="")
    return 0


def cmd_fsck(args) -> int:
    from ..recovery import fsck
    store = _open(args, read_only=True)
    try:
        report = fsck(store, verify_payloads=not args.quick)
    finally:
        store.close()
    print(report.to_text(), end="")
    return 0 if report.ok else 1


# ---------------------------------------------------------------------------
# benchmarks

def _workload(args, config: StoreConfig) -> WorkloadConfig:
    usable = config.capacity * (config.width - 1) // config.width
    return WorkloadConfig(size_model_from_text(args.size_model), args.utilization,
                          int(getattr(args, "churn", 0) * usable), args.threads, args.seed)


def _emit(args, rows: list[dict], extra: dict | None = None) -> None:
    text = "".join(f"{k}={v}\n" for row in rows[-1:] for k, v in row.items())
    text += "".join(f"{k}={v}\n" for k, v in (extra or {}).items())
    print(text, end="")
    out = args.out or f"{args.kind}-metrics.txt"
    Path(out).write_text(text)
    metrics_mod.write_csv(args.csv or f"{args.kind}.csv", rows)


def cmd_bench(args) -> int:
    config = _config(args)
    tmp = None
    if args.keep:
        root = Path(args.keep)
    else:
        tmp = tempfile.mkdtemp(prefix="zonestore-bench-")
        root = Path(tmp) / "store"
    try:
        if args.kind == "recovery":
            workload = _workload(args, config)
            points = [int(i * parse_size(args.step)) for i in range(args.points)]
            table = run_recovery_bench(Path(root) / "recovery", config, workload,
                                       parse_size(args.interval), points)
            rows = [p.to_dict() for p in table]
            slope, intercept, r2 = linear_fit([p.sets_examined for p in table],
                                              [p.wall_time for p in table])
            _emit(args, rows, {"slope": slope, "intercept": intercept, "r_squared": r2})
            return 0
        store = Store.create(root, config)
        try:
            h = Harness(store, _workload(args, config))
            rows = []
            if args.kind == "churn":
                fill, churn = run_churn(h)
                rows = [fill.to_dict(), churn.to_dict()]
            else:
                rows.append(run_fill(h).to_dict())
                if args.kind == "read":
                    rows.append(run_read(h, args.count, args.seed).to_dict())
            h.validate(read=args.kind != "read")
            gap = metrics_mod.accounting_gap(store)
            _emit(args, rows, {"accounting_gap": gap})
        finally:
            store.close(snapshot=False)
        return 0
    finally:
        if tmp:
            shutil.rmtree(tmp, ignore_errors=True)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zonestore", description=__doc__.splitlines()[0])
    p.add_argument("--root", default="zonestore-data", help="store directory")
    p.add_argument("--config", help="key=value config file (see docs/ondisk-format.md)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="create a store")
    _add_geometry(s)
    s.set_defaults(func=cmd_init)

    for name, func in (("put", cmd_put), ("get", cmd_get), ("delete", cmd_delete),
                       ("stat", cmd_stat)):
        s = sub.add_parser(name, help=f"{name} an object")
        s.add_argument("--id", required=True, help="64 hex digits")
        s.set_defaults(func=func)
        if name == "put":
            s.add_argument("--file", required=True, help="payload file or - for stdin")
        if name == "get":
            s.add_argument("--out", help="write payload here instead of stdout")

    s = sub.add_parser("gc", help="run garbage collection")
    s.add_argument("--sets", type=int, help="clean exactly this many victims")
    s.set_defaults(func=cmd_gc)

    s = sub.add_parser("snapshot", help="write an index snapshot")
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("recover", help="run recovery and print its report")
    s.add_argument("--read-only", action="store_true")
    s.add_argument("--metrics", help="also write the report as key=value")
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("rebuild", help="rebuild a failed drive onto a new spare")
    s.add_argument("--failed", type=int, required=True)
    s.set_defaults(func=cmd_rebuild)

    s = sub.add_parser("fsck", help="compare the index with on-disk markers")
    s.add_argument("--quick", action="store_true", help="skip payload and parity checks")
    s.set_defaults(func=cmd_fsck)

    s = sub.add_parser("bench", help="run a benchmark on a fresh store")
    s.add_argument("kind", choices=["fill", "read", "churn", "recovery"])
    _add_geometry(s)
    s.add_argument("--size-model", default="lognormal:2MiB:1.0:16KiB:160MiB")
    s.add_argument("--utilization", type=float, default=0.8)
    s.add_argument("--churn", type=float, default=3.0, help="churn as a multiple of capacity")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--count", type=int, help="objects to read (default: all)")
    s.add_argument("--points", type=int, default=8, help="recovery crash points")
    s.add_argument("--step", default="64MiB", help="post-snapshot ingest between crash points")
    s.add_argument("--interval", default="256MiB", help="ingest before the snapshot")
    s.add_argument("--keep", metavar="DIR", help="build the store here and keep it "
                   "(default: a temporary directory)")
    s.add_argument("--out", help="metrics file (default <kind>-metrics.txt)")
    s.add_argument("--csv", help="CSV table (default <kind>.csv)")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FileExistsError) as e:
        print(f"zonestore: {e}", file=sys.stderr)
        return 2 if isinstance(e, ValueError) else 1
    except NotFound as e:
        print(f"zonestore: object {e} not found", file=sys.stderr)
        return 1
    except (StoreError, Exception) as e:  # noqa: BLE001 - report, don't trace
        if args.verbose:
            raise
        print(f"zonestore: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
