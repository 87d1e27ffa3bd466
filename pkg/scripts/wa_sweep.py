"""Write amplification across utilization levels for one object size.

Example::

    python scripts/wa_sweep.py --size-model fixed:16MiB --levels 0.7 0.8 0.9 --churn 2
    python scripts/wa_sweep.py --size-model fixed:16KiB --block-size 512 --out wa-small.csv
"""

import argparse
import logging
import shutil
import tempfile
from pathlib import Path

from zonestore.bench import Harness, WorkloadConfig, run_churn
from zonestore.bench.metrics import write_csv
from zonestore.bench.workload import size_model_from_text
from zonestore.store import Store, StoreConfig, parse_size


def sweep(config: StoreConfig, size_model: str, levels, churn: float, seed: int) -> list[dict]:
    rows = []
    usable = config.capacity * (config.width - 1) // config.width
    for u in levels:
        root = Path(tempfile.mkdtemp(prefix="wa-sweep-"))
        try:
            store = Store.create(root / "store", config)
            wl = WorkloadConfig(size_model_from_text(size_model), u, int(churn * usable), 1, seed)
            _, m = run_churn(Harness(store, wl))
            store.close(snapshot=False)
        finally:
            shutil.rmtree(root, ignore_errors=True)
        row = {"target_utilization": u, **m.to_dict()}
        logging.info("u=%.2f wa_data=%.3f wa_total=%.3f", u, m.wa_data, m.wa_total)
        rows.append(row)
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size-model", default="fixed:16MiB")
    p.add_argument("--levels", type=float, nargs="+", default=[0.7, 0.8, 0.9])
    p.add_argument("--churn", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--zones", type=int, default=64)
    p.add_argument("--zone-size", type=parse_size, default="8MiB")
    p.add_argument("--block-size", type=parse_size, default=4096)
    p.add_argument("--out", default="wa-sweep.csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = StoreConfig(zones=args.zones, zone_size=args.zone_size, block_size=args.block_size)
    rows = sweep(cfg, args.size_model, args.levels, args.churn, args.seed)
    write_csv(args.out, rows)
    for r in rows:
        print(f"{r['target_utilization']:.2f} wa_data={r['wa_data']:.3f} wa_total={r['wa_total']:.3f}")


if __name__ == "__main__":
    main()
