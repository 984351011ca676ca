"""CSV grids and markdown tables for benchmark results."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Optional

from .workload import Metrics

CSV_COLUMNS = ("provider", "mode", "pattern", "block_size", "jobs",
               "throughput_bytes_per_s", "iops", "p50_us", "p95_us", "p99_us")
GIB = 1 << 30
OK, FAILED = "OK", "FAILED"


@dataclass
class ResultRow:
    provider: str
    mode: str
    pattern: str
    block_size: int
    jobs: int
    metrics: Optional[Metrics] = None
    status: str = OK
    iodepth: int = 1
    detail: str = ""

    @property
    def key(self) -> tuple:
        return (self.provider, self.mode, self.pattern, self.block_size, self.jobs, self.iodepth)


def _num(v: Optional[float], digits: int = 1) -> str:
    return "" if v is None else f"{v:.{digits}f}"


def csv_text(rows: Iterable[ResultRow]) -> str:
    """The grid as CSV.

    The ten fixed columns always come first.  A ``status`` column is added
    when some cell failed and an ``iodepth`` column when some cell ran at a
    depth other than 1, so plain sweeps keep the bare header.
    """
    rows = sorted(rows, key=lambda r: r.key)
    with_status = any(r.status != OK for r in rows)
    with_depth = any(r.iodepth != 1 for r in rows)
    header = list(CSV_COLUMNS) + (["status"] if with_status else []) + (["iodepth"] if with_depth else [])
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        m = r.metrics if r.status == OK else None
        line = [r.provider, r.mode, r.pattern, r.block_size, r.jobs,
                _num(m.throughput if m else None), _num(m.iops if m else None),
                _num(m.p50_us if m else None), _num(m.p95_us if m else None), _num(m.p99_us if m else None)]
        if with_status:
            line.append(r.status)
        if with_depth:
            line.append(r.iodepth)
        w.writerow(line)
    return out.getvalue()


def write_csv(path: str, rows: Iterable[ResultRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(rows))


def gib_per_s(bytes_per_s: float) -> str:
    return f"{bytes_per_s / GIB:.2f} GiB/s"


def markdown(rows: Iterable[ResultRow]) -> str:
    head = "| provider | mode | pattern | bs | jobs | throughput | IOPS | p50 µs | p95 µs | p99 µs | status |"
    lines = [head, "|" + "---|" * (head.count("|") - 1)]
    for r in sorted(rows, key=lambda r: r.key):
        m = r.metrics if r.status == OK else None
        empty = m is None or m.ops_completed == 0
        cells = [r.provider, r.mode, r.pattern, str(r.block_size), str(r.jobs),
                 "-" if empty else gib_per_s(m.throughput),
                 "-" if empty else f"{m.iops:.0f}",
                 *("-" if empty or v is None else f"{v:.1f}" for v in
                   ((m.p50_us, m.p95_us, m.p99_us) if m else (None,) * 3)),
                 r.status]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
