"""Extents and the per-object index that resolves which extent owns a byte."""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .blockmap import Run


class Tier(enum.IntEnum):
    SCM = 0
    NVME = 1
    HOLE = 2  # punched range, reads as zeros


@dataclass(eq=False)
class Extent:
    offset: int
    length: int
    epoch: int
    checksum: int
    tier: Tier
    # SCM: heap handle (int); NVME: block runs; HOLE: None
    location: Union[int, list[Run], None] = field(default=None, repr=False)

    @property
    def end(self) -> int:
        return self.offset + self.length

    def footprint(self) -> int:
        """Blocks held on the NVMe tier."""
        if self.tier is not Tier.NVME:
            return 0
        return sum(c for _, c in self.location)


@dataclass(frozen=True)
class ExtentInfo:
    """What a fetch reports for each extent that contributed bytes."""

    offset: int
    length: int
    epoch: int
    checksum: int
    tier: Tier


class SegmentMap:
    """Non-overlapping ``[start, end) -> extent`` segments for the newest image.

    Inserting an extent shadows whatever it overlaps, splitting partially
    covered neighbours.
    """

    def __init__(self):
        self._starts: list[int] = []
        self._segs: list[tuple[int, int, Extent]] = []

    def __len__(self) -> int:
        return len(self._segs)

    def insert(self, ext: Extent) -> None:
        a, b = ext.offset, ext.end
        starts, segs = self._starts, self._segs
        i = bisect.bisect_right(starts, a) - 1
        if i < 0 or segs[i][1] <= a:
            i += 1
        j = i
        new: list[tuple[int, int, Extent]] = []
        while j < len(segs) and segs[j][0] < b:
            s, e, x = segs[j]
            if s < a:
                new.append((s, a, x))
            if e > b:
                new.append((b, e, x))
            j += 1
        new.insert(sum(1 for n in new if n[0] < a), (a, b, ext))
        segs[i:j] = new
        starts[i:j] = [n[0] for n in new]

    def overlapping(self, a: int, b: int) -> Iterator[tuple[int, int, Extent]]:
        """Segments clipped to ``[a, b)``."""
        starts, segs = self._starts, self._segs
        i = bisect.bisect_right(starts, a) - 1
        if i < 0:
            i = 0
        while i < len(segs):
            s, e, x = segs[i]
            if s >= b:
                break
            if e > a:
                yield max(s, a), min(e, b), x
            i += 1

    def extents(self) -> set[Extent]:
        return {x for _, _, x in self._segs}

    def segments(self) -> list[tuple[int, int, Extent]]:
        return list(self._segs)

    def end(self) -> int:
        """One past the last byte covered by a non-hole extent."""
        for s, e, x in reversed(self._segs):
            if x.tier is not Tier.HOLE:
                return e
        return 0


def visible_at(extents: list[Extent], epoch: Optional[int]) -> SegmentMap:
    """Resolve the image at ``epoch`` from an epoch-ordered extent list."""
    m = SegmentMap()
    for x in extents:
        if epoch is not None and x.epoch > epoch:
            break
        m.insert(x)
    return m
