"""Run a workload matrix cell by cell, recording failures instead of stopping."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..engine.config import parse_size
from ..errors import Ros2Error, Status
from ..transport import PROVIDERS
from .report import FAILED, OK, ResultRow
from .workload import PATTERNS, WorkloadSpec, run

log = logging.getLogger(__name__)

ClientFactory = Callable[[str, str], object]  # (provider, mode) -> mounted file client


def _size(v) -> int:
    return v if isinstance(v, int) else parse_size(str(v))


@dataclass
class Matrix:
    patterns: list[str] = field(default_factory=lambda: list(PATTERNS))
    block_sizes: list[int] = field(default_factory=lambda: [1 << 20, 4096])
    jobs: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16])
    providers: list[str] = field(default_factory=lambda: list(PROVIDERS))
    modes: list[str] = field(default_factory=lambda: ["inline", "offload"])
    file_size: int = 16 << 20
    op_count: Optional[int] = 256
    duration: Optional[float] = None
    seed: int = 0
    iodepth: int = 1

    def cells(self) -> list[tuple[str, str, str, int, int]]:
        return list(itertools.product(self.providers, self.modes, self.patterns, self.block_sizes, self.jobs))

    def spec(self, provider: str, mode: str, pattern: str, bs: int, jobs: int) -> WorkloadSpec:
        return WorkloadSpec(pattern=pattern, block_size=bs, jobs=jobs, file_size=self.file_size,
                            op_count=self.op_count, duration=self.duration, provider=provider, mode=mode,
                            seed=self.seed, iodepth=self.iodepth, directory=f"/bench-{bs}")


def load_matrix(path: str) -> Matrix:
    """A JSON object whose keys mirror :class:`Matrix`; sizes may be strings like "1MiB"."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        m = Matrix(**{k: v for k, v in raw.items() if k not in ("block_sizes", "file_size")})
        if "block_sizes" in raw:
            m.block_sizes = [_size(b) for b in raw["block_sizes"]]
        if "file_size" in raw:
            m.file_size = _size(raw["file_size"])
    except (OSError, ValueError, TypeError) as exc:
        raise Ros2Error(Status.CONFIG, f"{path}: {exc}") from None
    if "duration" in raw and "op_count" not in raw:
        m.op_count = None
    return m


def sweep(matrix: Matrix, connect: ClientFactory) -> list[ResultRow]:
    """One row per cell.  A cell whose client cannot be built or whose run
    fails becomes a FAILED row and the sweep moves on."""
    clients: dict[tuple[str, str], object] = {}
    broken: dict[tuple[str, str], str] = {}
    rows = []
    for provider, mode, pattern, bs, jobs in matrix.cells():
        row = ResultRow(provider, mode, pattern, bs, jobs, iodepth=matrix.iodepth)
        key = (provider, mode)
        try:
            if key in broken:
                raise Ros2Error(Status.SETUP_FAILED, broken[key])
            if key not in clients:
                try:
                    clients[key] = connect(provider, mode)
                except Ros2Error as exc:
                    broken[key] = str(exc)
                    raise
            spec = matrix.spec(provider, mode, pattern, bs, jobs)
            metrics, _ = run(clients[key], spec)
            row.metrics = metrics
            if not metrics.valid:
                row.status, row.detail = FAILED, metrics.error or ""
        except Ros2Error as exc:
            row.status, row.detail = FAILED, str(exc)
        if row.status != OK:
            log.warning("cell %s failed: %s", row.key, row.detail)
        rows.append(row)
    for c in clients.values():
        shutdown = getattr(c, "shutdown", None)
        if shutdown is not None:
            shutdown()
    return rows
