"""Block allocator for the NVMe-analog backing file.

One byte per 4 KiB block (0 = free).  Byte granularity lets contiguous runs
be found with ``bytearray.find``, which is the hot path for large extents.
"""

from __future__ import annotations

import threading

from ..errors import Ros2Error, Status

BLOCK_SIZE = 4096

Run = tuple[int, int]  # (first block, block count)


class BlockMap:
    def __init__(self, total_blocks: int, reserved: int = 1):
        if total_blocks <= reserved:
            raise Ros2Error(Status.INVALID_ARGUMENT, "pool too small")
        self.total = total_blocks
        self.reserved = reserved
        self._map = bytearray(total_blocks)
        self._map[:reserved] = b"\x01" * reserved
        self._free = total_blocks - reserved
        self._hint = reserved
        self._lock = threading.Lock()

    @property
    def free(self) -> int:
        return self._free

    @property
    def allocated(self) -> int:
        """Blocks in use, counting the reserved header block(s)."""
        return self.total - self._free

    @property
    def data_blocks_in_use(self) -> int:
        return self.allocated - self.reserved

    def alloc(self, nblocks: int) -> list[Run]:
        if nblocks <= 0:
            return []
        with self._lock:
            if nblocks > self._free:
                raise Ros2Error(Status.ENOSPC, f"need {nblocks} blocks, {self._free} free")
            want = b"\x00" * nblocks
            i = self._map.find(want, self._hint)
            if i < 0:
                i = self._map.find(want, self.reserved)
            if i >= 0:
                runs = [(i, nblocks)]
            else:
                runs = self._scatter(nblocks)
            for start, count in runs:
                self._map[start : start + count] = b"\x01" * count
            self._free -= nblocks
            end = runs[-1][0] + runs[-1][1]
            self._hint = end if end < self.total else self.reserved
            return runs

    def _scatter(self, nblocks: int) -> list[Run]:
        runs: list[Run] = []
        pos = self.reserved
        need = nblocks
        while need:
            i = self._map.find(0, pos)
            j = self._map.find(1, i)
            if j < 0:
                j = self.total
            take = min(need, j - i)
            runs.append((i, take))
            need -= take
            pos = j
        return runs

    def reserve(self, runs: list[Run]) -> None:
        """Mark specific runs used (manifest replay). Double allocation is corruption."""
        with self._lock:
            for start, count in runs:
                if start < self.reserved or start + count > self.total:
                    raise Ros2Error(Status.POOL_CORRUPT, f"run {start}+{count} outside pool")
                if any(self._map[start : start + count]):
                    raise Ros2Error(Status.POOL_CORRUPT, f"block run {start}+{count} allocated twice")
                self._map[start : start + count] = b"\x01" * count
                self._free -= count

    def release(self, runs: list[Run]) -> None:
        with self._lock:
            for start, count in runs:
                if self._map[start : start + count].count(1) != count:
                    raise Ros2Error(Status.POOL_CORRUPT, f"double free of {start}+{count}")
                self._map[start : start + count] = b"\x00" * count
                self._free += count

    def is_allocated(self, block: int) -> bool:
        return bool(self._map[block])
