"""Host <-> proxy command channel.

Commands and replies are WireFrames in the 0x40 range.  They never carry
file data: a write names a pattern seed and the proxy expands it, and a
read answers with a byte count and CRC32C.  No frame exceeds
``MAX_SHIM_FRAME`` bytes, header included; directory listings are paged.

Command payload::

    cmd_id u64 | op u8 | flags u32 | mode u32 | handle u64 | offset u64 |
    length u64 | seed u64 | path (u16 + utf-8) | args (u32 + bytes)

Reply payload::

    cmd_id u64 | status u16 | nbytes u64 | crc u32 | latency_us u32 |
    handle u64 | body (rest)
"""

from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass

from ..errors import Ros2Error, Status
from ..wire import HEADER_SIZE, Reader, Writer

MAX_SHIM_FRAME = 4096
MAX_SHIM_PAYLOAD = MAX_SHIM_FRAME - HEADER_SIZE

CMD_HEAD = struct.Struct("<QBIIQQQQ")
REPLY_HEAD = struct.Struct("<QHQIIQ")
STAT_BODY = struct.Struct("<BQIQ")  # kind, size, mode, mtime


class ShimOp(enum.IntEnum):
    MOUNT = 1
    OPEN = 2
    READ = 3
    WRITE_PATTERN = 4
    FSYNC = 5
    CLOSE = 6
    MKDIR = 7
    READDIR = 8
    UNLINK = 9
    STAT = 10
    RUNJOB = 11


@dataclass
class ShimCommand:
    op: ShimOp
    cmd_id: int = 0
    path: str = ""
    handle: int = 0
    offset: int = 0
    length: int = 0
    flags: int = 0
    mode: int = 0
    seed: int = 0
    args: bytes = b""

    def encode(self) -> bytes:
        w = Writer().raw(CMD_HEAD.pack(self.cmd_id, self.op, self.flags, self.mode, self.handle,
                                       self.offset, self.length, self.seed))
        w.text(self.path).blob(self.args)
        out = w.getvalue()
        if len(out) > MAX_SHIM_PAYLOAD:
            raise Ros2Error(Status.OVERSIZED, f"shim command of {len(out)} bytes exceeds the frame cap")
        return out

    @classmethod
    def decode(cls, payload) -> "ShimCommand":
        r = Reader(payload)
        cmd_id, op, flags, mode, handle, offset, length, seed = CMD_HEAD.unpack(r.raw(CMD_HEAD.size))
        try:
            op = ShimOp(op)
        except ValueError:
            raise Ros2Error(Status.UNSUPPORTED, f"shim op {op}") from None
        return cls(op, cmd_id, r.text(), handle, offset, length, flags, mode, seed, r.blob())


@dataclass
class ShimReply:
    cmd_id: int
    status: Status = Status.OK
    nbytes: int = 0
    crc: int = 0
    latency_us: int = 0
    handle: int = 0
    body: bytes = b""

    def encode(self) -> bytes:
        head = REPLY_HEAD.pack(self.cmd_id, self.status, self.nbytes, self.crc,
                               min(self.latency_us, 0xFFFF_FFFF), self.handle)
        room = MAX_SHIM_PAYLOAD - len(head)
        if len(self.body) > room:
            if self.status == Status.OK:
                raise Ros2Error(Status.OVERSIZED, "shim reply body exceeds the frame cap")
            return head + self.body[:room]
        return head + self.body

    @classmethod
    def decode(cls, payload) -> "ShimReply":
        cmd_id, status, nbytes, crc, lat, handle = REPLY_HEAD.unpack_from(payload)
        st = Status(status) if status in Status._value2member_map_ else Status.MALFORMED
        return cls(cmd_id, st, nbytes, crc, lat, handle, bytes(payload[REPLY_HEAD.size :]))

    def raise_for_status(self) -> "ShimReply":
        if self.status != Status.OK:
            raise Ros2Error(self.status, self.body.decode("utf-8", "replace"))
        return self


def pattern_bytes(seed: int, length: int) -> bytes:
    """Deterministic payload for ``seed``; both sides can regenerate it."""
    return random.Random(seed).randbytes(length)


def encode_page(names: list[str], start: int) -> tuple[bytes, int]:
    """Pack as many of ``names[start:]`` as fit; returns (body, next index or 0 when done)."""
    room = MAX_SHIM_PAYLOAD - REPLY_HEAD.size - 3
    w = Writer()
    used = 0
    i = start
    while i < len(names):
        raw = names[i].encode("utf-8")
        if used + 2 + len(raw) > room:
            break
        w.text(names[i])
        used += 2 + len(raw)
        i += 1
    more = i < len(names)
    body = struct.pack("<BH", int(more), i - start) + w.getvalue()
    return body, (i if more else 0)


def decode_page(body: bytes) -> tuple[list[str], bool]:
    more, n = struct.unpack_from("<BH", body)
    r = Reader(memoryview(body)[3:])
    return [r.text() for _ in range(n)], bool(more)
