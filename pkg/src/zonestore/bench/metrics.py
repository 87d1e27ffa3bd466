"""Run metrics: write amplification, op counts and their text/CSV forms."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class RunMetrics:
    phase: str = ""
    bytes_ingested: int = 0
    bytes_written_total: int = 0
    bytes_written_excl_parity: int = 0
    read_bytes: int = 0
    op_counts: dict = field(default_factory=dict)
    written_by_category: dict = field(default_factory=dict)
    gc: dict = field(default_factory=dict)
    recovery: dict = field(default_factory=dict)
    utilization: float = 0.0
    wall_time: float = 0.0

    @property
    def wa_total(self) -> float:
        return self.bytes_written_total / self.bytes_ingested if self.bytes_ingested else 0.0

    @property
    def wa_data(self) -> float:
        return self.bytes_written_excl_parity / self.bytes_ingested if self.bytes_ingested else 0.0

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items()
               if not isinstance(v, dict)}
        out["wa_total"] = round(self.wa_total, 6)
        out["wa_data"] = round(self.wa_data, 6)
        for prefix in ("op_counts", "written_by_category", "gc", "recovery"):
            for k, v in sorted(getattr(self, prefix).items()):
                out[f"{prefix}.{k}"] = v
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


class Probe:
    """Counter baseline taken at the start of a phase."""

    def __init__(self, store):
        self.store = store
        self.stats = store.table.stats.snapshot()
        self.ingested = store.bytes_ingested
        self.ops = dict(store.op_counts)
        gm = store.gc.metrics
        self.gc = (gm.bytes_relocated, gm.bytes_reclaimed, gm.cleans_completed)

    def finish(self, phase: str, *, read_bytes: int = 0, wall_time: float = 0.0) -> RunMetrics:
        store = self.store
        if not store.closed and not store.table.drives.faults.crashed:
            store.flush()
        now = store.table.stats.snapshot()
        written = {k: now.get(k, 0) - self.stats.get(k, 0) for k in now}
        written = {k: v for k, v in written.items() if v}
        total = sum(written.values())
        parity = sum(v for k, v in written.items() if k.endswith("parity"))
        gm = store.gc.metrics
        return RunMetrics(
            phase=phase,
            bytes_ingested=store.bytes_ingested - self.ingested,
            bytes_written_total=total,
            bytes_written_excl_parity=total - parity,
            read_bytes=read_bytes,
            op_counts={k: v - self.ops.get(k, 0) for k, v in store.op_counts.items()},
            written_by_category=written,
            gc={"bytes_relocated": gm.bytes_relocated - self.gc[0],
                "bytes_reclaimed": gm.bytes_reclaimed - self.gc[1],
                "cleans_completed": gm.cleans_completed - self.gc[2]},
            utilization=round(store.utilization(), 6),
            wall_time=round(wall_time, 6),
        )


def accounting_gap(store) -> int:
    """Bytes the device counters saw that the write statistics did not (should be 0)."""
    return store.table.drives.bytes_appended() - store.table.stats.total()


def write_text(path, metrics: RunMetrics, extra: dict | None = None) -> None:
    text = metrics.to_text() + "".join(f"{k}={v}\n" for k, v in (extra or {}).items())
    Path(path).write_text(text)


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
