"""WireFrame codec shared by the control plane, the data plane and the shim.

Layout (little-endian)::

    magic "ROS2" | version u8 | type u8 | flags u16 | payload_length u32 | payload
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .errors import Ros2Error, Status

MAGIC = b"ROS2"
VERSION = 1
HEADER = struct.Struct("<4sBBHI")
HEADER_SIZE = HEADER.size  # 12
MAX_PAYLOAD = 64 << 20


class FrameType(enum.IntEnum):
    HELLO = 0x01
    HELLO_ACK = 0x02
    RPC_REQ = 0x10
    RPC_RESP = 0x11
    EAGER_DATA = 0x20
    RDV_NOTIFY = 0x21
    ONESIDED_READ_REQ = 0x22
    ONESIDED_DATA = 0x23
    ERROR = 0x2F
    # host <-> proxy shim channel
    SHIM_CMD = 0x40
    SHIM_REPLY = 0x41
    SHIM_ERROR = 0x4F


# flag bits
F_RESPONSE = 0x0001
F_MESSAGE = 0x0002  # EAGER_DATA: plain two-sided message, no sink
F_SINK = 0x0004  # EAGER_DATA: payload targets a (rkey, offset) sink
F_STAGE2 = 0x0008  # HELLO: challenge response
F_DATA_ATTACH = 0x0010  # HELLO: bind a data-plane connection to a session


class MalformedFrame(Ros2Error):
    def __init__(self, message: str = ""):
        super().__init__(Status.MALFORMED, message)

    def __reduce__(self):
        return (self.__class__, (self.message,))


@dataclass
class Frame:
    type: int
    flags: int = 0
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_frame(self.type, self.flags, self.payload)


def encode_header(ftype: int, flags: int, length: int) -> bytes:
    if length > MAX_PAYLOAD:
        raise MalformedFrame(f"payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, VERSION, ftype, flags, length)


def encode_frame(ftype: int, flags: int, payload=b"") -> bytes:
    return encode_header(ftype, flags, len(payload)) + bytes(payload)


def decode_header(buf) -> tuple[int, int, int]:
    """Return ``(type, flags, payload_length)``; raise MalformedFrame on garbage."""
    if len(buf) < HEADER_SIZE:
        raise MalformedFrame("short header")
    magic, version, ftype, flags, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise MalformedFrame(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise MalformedFrame(f"payload length {length} too large")
    return ftype, flags, length


def decode_frame(buf) -> Frame:
    ftype, flags, length = decode_header(buf)
    if len(buf) != HEADER_SIZE + length:
        raise MalformedFrame("length mismatch")
    return Frame(ftype, flags, bytes(buf[HEADER_SIZE:]))


class Reader:
    """Sequential little-endian field reader over a payload."""

    def __init__(self, buf, pos: int = 0):
        self.buf = memoryview(buf)
        self.pos = pos

    def _take(self, fmt: str):
        try:
            vals = struct.unpack_from(fmt, self.buf, self.pos)
        except struct.error as exc:
            raise MalformedFrame(f"truncated record: {exc}") from None
        self.pos += struct.calcsize(fmt)
        return vals

    def u8(self) -> int:
        return self._take("<B")[0]

    def u16(self) -> int:
        return self._take("<H")[0]

    def u32(self) -> int:
        return self._take("<I")[0]

    def u64(self) -> int:
        return self._take("<Q")[0]

    def i64(self) -> int:
        return self._take("<q")[0]

    def f64(self) -> float:
        return self._take("<d")[0]

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise MalformedFrame("truncated bytes field")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def blob(self) -> bytes:
        """u32 length-prefixed bytes."""
        return self.raw(self.u32())

    def text(self) -> str:
        """u16 length-prefixed UTF-8."""
        try:
            return self.raw(self.u16()).decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedFrame("invalid UTF-8") from None

    def rest(self) -> memoryview:
        out = self.buf[self.pos :]
        self.pos = len(self.buf)
        return out

    def remaining(self) -> int:
        return len(self.buf) - self.pos


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self.parts.append(struct.pack("<B", v))
        return self

    def u16(self, v: int) -> "Writer":
        self.parts.append(struct.pack("<H", v))
        return self

    def u32(self, v: int) -> "Writer":
        self.parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self.parts.append(struct.pack("<Q", v))
        return self

    def i64(self, v: int) -> "Writer":
        self.parts.append(struct.pack("<q", v))
        return self

    def f64(self, v: float) -> "Writer":
        self.parts.append(struct.pack("<d", v))
        return self

    def raw(self, b) -> "Writer":
        self.parts.append(bytes(b))
        return self

    def blob(self, b) -> "Writer":
        self.u32(len(b))
        return self.raw(b)

    def text(self, s: str) -> "Writer":
        b = s.encode("utf-8")
        self.u16(len(b))
        return self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)
