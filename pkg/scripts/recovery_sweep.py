"""Recovery time against zone sets examined at increasing post-snapshot ingest."""

import argparse
import logging
import tempfile

from zonestore.bench import WorkloadConfig, linear_fit, run_recovery_bench
from zonestore.bench.metrics import write_csv
from zonestore.bench.workload import size_model_from_text
from zonestore.store import StoreConfig, parse_size


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--size-model", default="lognormal:2MiB:1.0:16KiB:160MiB")
    p.add_argument("--points", type=int, default=8)
    p.add_argument("--step", type=parse_size, default="200MiB")
    p.add_argument("--interval", type=parse_size, default="128MiB")
    p.add_argument("--out", default="recovery.csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    wl = WorkloadConfig(size_model_from_text(args.size_model), 0.8, 0, 1, 1)
    with tempfile.TemporaryDirectory(prefix="recovery-") as tmp:
        table = run_recovery_bench(tmp, StoreConfig(), wl, args.interval,
                                   [i * args.step for i in range(args.points)])
    rows = [pt.to_dict() for pt in table]
    write_csv(args.out, rows)
    slope, intercept, r2 = linear_fit([pt.sets_examined for pt in table],
                                      [pt.wall_time for pt in table])
    for r in rows:
        print(r)
    print(f"slope={slope:.6f}s/set intercept={intercept:.6f}s r2={r2:.5f}")


if __name__ == "__main__":
    main()
