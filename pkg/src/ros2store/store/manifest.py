"""Append-only pool manifest.

Each record is ``type u8 | body_len u32 | body | crc32c u32`` (little-endian),
the CRC covering type, length and body.  Replay stops at the first record
that is short or fails its CRC; everything after it is a torn tail from a
crash and is truncated away before new records are appended.

Small (SCM-tier) extents carry their payload inline so the byte-addressable
tier survives a crash without a separate snapshot file.
"""

from __future__ import annotations

import enum
import logging
import os
import struct
import threading
from dataclasses import dataclass
from typing import Iterator, Optional, Union

from ..checksum import crc32c
from ..errors import Ros2Error, Status
from ..wire import Reader, Writer
from .blockmap import Run
from .extents import Tier

log = logging.getLogger(__name__)

FRAME = struct.Struct("<BI")
TRAILER = struct.Struct("<I")


class Rec(enum.IntEnum):
    POOL = 1
    CONTAINER = 2
    EXTENT = 3
    RECLAIM = 4
    SNAPSHOT = 5
    HORIZON = 6
    EPOCH = 7


@dataclass
class PoolRec:
    pool_id: int
    scm_capacity: int
    nvme_capacity: int
    block_size: int


@dataclass
class ContainerRec:
    container_id: int
    label: str


@dataclass
class ExtentRec:
    container_id: int
    hi: int
    lo: int
    epoch: int
    offset: int
    length: int
    checksum: int
    tier: Tier
    payload: Optional[bytes] = None  # SCM only
    runs: Optional[list[Run]] = None  # NVME only


@dataclass
class ReclaimRec:
    container_id: int
    hi: int
    lo: int
    epoch: int


@dataclass
class SnapshotRec:
    container_id: int
    epoch: int


@dataclass
class HorizonRec:
    container_id: int
    hi: int
    lo: int
    epoch: int


@dataclass
class EpochRec:
    container_id: int
    epoch: int


Record = Union[PoolRec, ContainerRec, ExtentRec, ReclaimRec, SnapshotRec, HorizonRec, EpochRec]


def encode(rec: Record) -> bytes:
    w = Writer()
    if isinstance(rec, PoolRec):
        kind = Rec.POOL
        w.u64(rec.pool_id).u64(rec.scm_capacity).u64(rec.nvme_capacity).u32(rec.block_size)
    elif isinstance(rec, ContainerRec):
        kind = Rec.CONTAINER
        w.u64(rec.container_id).text(rec.label)
    elif isinstance(rec, ExtentRec):
        kind = Rec.EXTENT
        w.u64(rec.container_id).u64(rec.hi).u64(rec.lo).u64(rec.epoch)
        w.u64(rec.offset).u64(rec.length).u32(rec.checksum).u8(int(rec.tier))
        if rec.tier is Tier.SCM:
            w.raw(rec.payload)
        elif rec.tier is Tier.NVME:
            w.u32(len(rec.runs))
            for start, count in rec.runs:
                w.u64(start).u32(count)
    elif isinstance(rec, ReclaimRec):
        kind = Rec.RECLAIM
        w.u64(rec.container_id).u64(rec.hi).u64(rec.lo).u64(rec.epoch)
    elif isinstance(rec, SnapshotRec):
        kind = Rec.SNAPSHOT
        w.u64(rec.container_id).u64(rec.epoch)
    elif isinstance(rec, HorizonRec):
        kind = Rec.HORIZON
        w.u64(rec.container_id).u64(rec.hi).u64(rec.lo).u64(rec.epoch)
    elif isinstance(rec, EpochRec):
        kind = Rec.EPOCH
        w.u64(rec.container_id).u64(rec.epoch)
    else:
        raise TypeError(type(rec))
    body = w.getvalue()
    head = FRAME.pack(kind, len(body))
    return head + body + TRAILER.pack(crc32c(body, crc32c(head)))


def _decode_body(kind: int, body) -> Record:
    r = Reader(body)
    if kind == Rec.POOL:
        return PoolRec(r.u64(), r.u64(), r.u64(), r.u32())
    if kind == Rec.CONTAINER:
        return ContainerRec(r.u64(), r.text())
    if kind == Rec.EXTENT:
        cid, hi, lo, epoch, off, length, crc, tier = (r.u64(), r.u64(), r.u64(), r.u64(),
                                                      r.u64(), r.u64(), r.u32(), Tier(r.u8()))
        rec = ExtentRec(cid, hi, lo, epoch, off, length, crc, tier)
        if tier is Tier.SCM:
            rec.payload = r.raw(length)
        elif tier is Tier.NVME:
            rec.runs = [(r.u64(), r.u32()) for _ in range(r.u32())]
        return rec
    if kind == Rec.RECLAIM:
        return ReclaimRec(r.u64(), r.u64(), r.u64(), r.u64())
    if kind == Rec.SNAPSHOT:
        return SnapshotRec(r.u64(), r.u64())
    if kind == Rec.HORIZON:
        return HorizonRec(r.u64(), r.u64(), r.u64(), r.u64())
    if kind == Rec.EPOCH:
        return EpochRec(r.u64(), r.u64())
    raise Ros2Error(Status.POOL_CORRUPT, f"unknown manifest record type {kind}")


def scan(data) -> tuple[list[Record], int]:
    """Decode records from ``data``; returns them and the length of the valid prefix."""
    view = memoryview(data)
    out: list[Record] = []
    pos = 0
    n = len(view)
    while pos + FRAME.size <= n:
        kind, blen = FRAME.unpack_from(view, pos)
        end = pos + FRAME.size + blen + TRAILER.size
        if end > n:
            break
        body = view[pos + FRAME.size : end - TRAILER.size]
        (want,) = TRAILER.unpack_from(view, end - TRAILER.size)
        if crc32c(body, crc32c(view[pos : pos + FRAME.size])) != want:
            break
        out.append(_decode_body(kind, body))
        pos = end
    return out, pos


class Manifest:
    """Writer side of the log.  Appends are serialized and reach the kernel
    before ``append`` returns; ``sync`` adds an fsync."""

    def __init__(self, path: str):
        self.path = path
        self._fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)
        self._lock = threading.Lock()
        self.size = os.fstat(self._fd).st_size

    @classmethod
    def create(cls, path: str, records: list[Record]) -> "Manifest":
        if os.path.exists(path):
            raise Ros2Error(Status.EXISTS, path)
        write_atomically(path, records)
        return cls(path)

    @staticmethod
    def load(path: str) -> list[Record]:
        """Replay the log, truncating any torn tail in place."""
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise Ros2Error(Status.IO, f"{path}: {exc}") from None
        records, valid = scan(data)
        if valid < len(data):
            log.warning("manifest %s: dropping %d-byte torn tail", path, len(data) - valid)
            with open(path, "r+b") as fh:
                fh.truncate(valid)
                os.fsync(fh.fileno())
        return records

    def append(self, *records: Record) -> None:
        blob = b"".join(encode(r) for r in records)
        with self._lock:
            try:
                os.write(self._fd, blob)
            except OSError as exc:
                raise Ros2Error(Status.IO, f"manifest append: {exc}") from None
            self.size += len(blob)

    def sync(self) -> None:
        with self._lock:
            os.fsync(self._fd)

    def replace(self, records: list[Record]) -> None:
        """Swap in a compacted log holding exactly ``records``."""
        with self._lock:
            write_atomically(self.path, records)
            os.close(self._fd)
            self._fd = os.open(self.path, os.O_RDWR | os.O_APPEND)
            self.size = os.fstat(self._fd).st_size

    def close(self) -> None:
        with self._lock:
            if self._fd >= 0:
                os.fsync(self._fd)
                os.close(self._fd)
                self._fd = -1


def write_atomically(path: str, records: list[Record]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        for chunk in _chunks(records):
            fh.write(chunk)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    dfd = os.open(os.path.dirname(os.path.abspath(path)), os.O_RDONLY)
    try:
        os.fsync(dfd)
    finally:
        os.close(dfd)


def _chunks(records: list[Record]) -> Iterator[bytes]:
    batch: list[bytes] = []
    size = 0
    for r in records:
        b = encode(r)
        batch.append(b)
        size += len(b)
        if size > 1 << 20:
            yield b"".join(batch)
            batch, size = [], 0
    if batch:
        yield b"".join(batch)
