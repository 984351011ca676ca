"""On-store records of the file layer: superblock, directory objects, paths."""

from __future__ import annotations

import enum
import struct
import time
from dataclasses import dataclass, replace
from typing import Iterable

from ..errors import Ros2Error, Status
from ..wire import MalformedFrame, Reader, Writer

SUPER_MAGIC = b"ROS2DFS1"
SUPERBLOCK = struct.Struct("<8sIQQ")  # magic, chunk_size, root hi, root lo
SUPER_HI, SUPER_LO = 0, 0
DEFAULT_CHUNK = 1 << 20
MIN_CHUNK = 4096
MAX_NAME = 255

DIR_MAGIC = b"DIR1"
DIR_HEAD = struct.Struct("<4sII")  # magic, entry count, total bytes
DIR_READ_HINT = 4096


class Kind(enum.IntEnum):
    FILE = 1
    DIR = 2


@dataclass(frozen=True)
class DirEntry:
    name: str
    hi: int
    lo: int
    kind: Kind
    mode: int = 0o644
    mtime: int = 0  # ns since epoch
    size: int = 0

    @property
    def oid(self) -> tuple[int, int]:
        return self.hi, self.lo

    def with_size(self, size: int, mtime: int) -> "DirEntry":
        return replace(self, size=size, mtime=mtime)


@dataclass(frozen=True)
class Superblock:
    chunk_size: int
    root_hi: int
    root_lo: int

    def encode(self) -> bytes:
        return SUPERBLOCK.pack(SUPER_MAGIC, self.chunk_size, self.root_hi, self.root_lo)

    @classmethod
    def decode(cls, raw: bytes) -> "Superblock":
        magic, chunk, hi, lo = SUPERBLOCK.unpack(raw[: SUPERBLOCK.size])
        if magic != SUPER_MAGIC:
            raise Ros2Error(Status.BAD_SUPERBLOCK, f"magic {magic!r}")
        if not valid_chunk(chunk):
            raise Ros2Error(Status.BAD_SUPERBLOCK, f"chunk size {chunk}")
        return cls(chunk, hi, lo)


def valid_chunk(c: int) -> bool:
    return c >= MIN_CHUNK and c & (c - 1) == 0


def now_ns() -> int:
    return time.time_ns()


def encode_dir(entries: Iterable[DirEntry]) -> bytes:
    body = Writer()
    n = 0
    for e in sorted(entries, key=lambda e: e.name):
        body.text(e.name).u64(e.hi).u64(e.lo).u8(e.kind).u32(e.mode).u64(e.mtime).u64(e.size)
        n += 1
    raw = body.getvalue()
    return DIR_HEAD.pack(DIR_MAGIC, n, DIR_HEAD.size + len(raw)) + raw


def dir_total(head: bytes) -> int:
    """Bytes occupied by a directory record, from its first bytes (0 = empty)."""
    magic, _, total = DIR_HEAD.unpack(head[: DIR_HEAD.size])
    if magic == b"\0\0\0\0":
        return 0
    if magic != DIR_MAGIC:
        raise Ros2Error(Status.MALFORMED, "not a directory record")
    return total


def decode_dir(raw) -> dict[str, DirEntry]:
    magic, n, total = DIR_HEAD.unpack(bytes(raw[: DIR_HEAD.size]))
    if magic == b"\0\0\0\0":
        return {}
    if magic != DIR_MAGIC:
        raise Ros2Error(Status.MALFORMED, "not a directory record")
    r = Reader(memoryview(raw)[DIR_HEAD.size : total])
    out = {}
    try:
        for _ in range(n):
            e = DirEntry(r.text(), r.u64(), r.u64(), Kind(r.u8()), r.u32(), r.u64(), r.u64())
            out[e.name] = e
    except (MalformedFrame, ValueError) as exc:
        raise Ros2Error(Status.MALFORMED, f"directory record: {exc}") from None
    return out


def split_path(path: str) -> tuple[list[str], bool]:
    """Components of an absolute path, and whether it ended with "/".

    Duplicate slashes collapse and "." vanishes; ".." is refused.
    """
    if not isinstance(path, str) or not path.startswith("/"):
        raise Ros2Error(Status.INVALID_ARGUMENT, f"path must be absolute: {path!r}")
    parts = []
    for comp in path.split("/"):
        if comp in ("", "."):
            continue
        if comp == "..":
            raise Ros2Error(Status.INVALID_ARGUMENT, "'..' is not supported")
        check_name(comp)
        parts.append(comp)
    trailing = path.endswith("/") or path.endswith("/.")
    return parts, bool(parts) and trailing


def check_name(name: str) -> None:
    raw = name.encode("utf-8", "surrogatepass")
    if not raw or len(raw) > MAX_NAME or "\0" in name or "/" in name:
        raise Ros2Error(Status.INVALID_NAME, f"bad name {name!r}")


def chunk_pieces(offset: int, length: int, chunk: int) -> list[tuple[int, int]]:
    """Split ``[offset, offset+length)`` on chunk boundaries into (offset, length) pieces."""
    out = []
    end = offset + length
    pos = offset
    while pos < end:
        stop = min(end, (pos // chunk + 1) * chunk)
        out.append((pos, stop - pos))
        pos = stop
    return out
