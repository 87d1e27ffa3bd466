"""Steady-state churn write amplification averaged over seeds."""

import argparse
import logging
import shutil
import tempfile
from pathlib import Path

from zonestore.bench import Harness, WorkloadConfig, run_churn
from zonestore.bench.metrics import write_csv
from zonestore.bench.workload import size_model_from_text
from zonestore.store import Store, StoreConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--size-model", default="lognormal:2MiB:1.0:16KiB:160MiB")
    p.add_argument("--utilization", type=float, default=0.8)
    p.add_argument("--churn", type=float, default=3.0)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--out", default="churn-seeds.csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = StoreConfig()
    usable = cfg.capacity * (cfg.width - 1) // cfg.width
    rows = []
    for seed in args.seeds:
        root = Path(tempfile.mkdtemp(prefix="churn-"))
        try:
            store = Store.create(root / "store", cfg)
            wl = WorkloadConfig(size_model_from_text(args.size_model), args.utilization,
                                int(args.churn * usable), 1, seed)
            h = Harness(store, wl)
            _, m = run_churn(h)
            h.validate(read=False)
            store.close(snapshot=False)
        finally:
            shutil.rmtree(root, ignore_errors=True)
        rows.append({"seed": seed, **m.to_dict()})
        print(f"seed {seed}: wa_data={m.wa_data:.3f} wa_total={m.wa_total:.3f}")
    mean = sum(r["wa_data"] for r in rows) / len(rows)
    print(f"mean wa_data={mean:.3f}")
    write_csv(args.out, rows)


if __name__ == "__main__":
    main()
