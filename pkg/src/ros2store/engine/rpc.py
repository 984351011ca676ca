"""Control-plane RPC records shared by the engine and its clients.

Every request is an RPC_REQ frame whose payload starts with
``op u16 | request_id u64``; the reply is an RPC_RESP frame starting with
``op u16 | request_id u64 | status u16``.  A failed reply carries a UTF-8
message after the status.  Requests the engine cannot route get an ERROR
frame: ``request_id u64 | status u16 | message``.

Session setup uses HELLO / HELLO_ACK frames before any RPC is accepted:

    client                                   engine
    HELLO          tenant u32, provider  ->
                                         <-  HELLO_ACK      status, session u64, nonce[16]
    HELLO|STAGE2   mac[32]               ->
                                         <-  HELLO_ACK|STAGE2 status, data_token[16], eager u32
    (data connection)
    HELLO|DATA_ATTACH session u64, data_token[16] ->
                                         <-  HELLO_ACK|DATA_ATTACH status

``mac = HMAC-SHA256(secret, nonce || session || tenant)``.  Nonces are
single-use, so a recorded stage-2 reply never authenticates twice.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Optional

from ..errors import Ros2Error, Status
from ..store.extents import ExtentInfo, Tier
from ..tenancy import TOKEN_RECORD
from ..wire import Reader, Writer

NONCE_BYTES = 16
TOKEN_BYTES = 16
LATEST = 0xFFFF_FFFF_FFFF_FFFF
TOKEN_RECORD_SIZE = TOKEN_RECORD.size

REQ_HEAD = struct.Struct("<HQ")
RESP_HEAD = struct.Struct("<HQH")
ERR_HEAD = struct.Struct("<QH")

HELLO = struct.Struct("<I")
HELLO_ACK = struct.Struct("<HQ16s")
STAGE2_ACK = struct.Struct("<H16sI")
ATTACH = struct.Struct("<Q16s")
ATTACH_ACK = struct.Struct("<H")


class Op(enum.IntEnum):
    CONNECT = 1
    POOL_CONNECT = 2
    CONT_OPEN = 3
    OBJ_UPDATE = 4
    OBJ_FETCH = 5
    OBJ_PUNCH = 6
    CAP_ISSUE = 7
    CAP_REVOKE = 8
    PING = 9
    CLOSE = 10
    OBJ_FLUSH = 11
    CONT_SNAPSHOT = 12


class Mode(enum.IntEnum):
    INLINE = 0
    REMOTE = 1  # bytes move by one-sided op against (rkey, offset)


def handshake_mac(secret: bytes, nonce: bytes, session_id: int, tenant_id: int) -> bytes:
    msg = nonce + struct.pack("<QI", session_id, tenant_id)
    return hmac.new(secret, msg, hashlib.sha256).digest()


def encode_request(op: int, request_id: int, body: bytes = b"") -> bytes:
    return REQ_HEAD.pack(op, request_id) + body


def encode_response(op: int, request_id: int, status: Status, body: bytes = b"") -> bytes:
    return RESP_HEAD.pack(op, request_id, status) + body


def encode_error(request_id: int, status: Status, message: str = "") -> bytes:
    return ERR_HEAD.pack(request_id, status) + message.encode("utf-8", "replace")[:1024]


def error_from(status: int, body) -> Ros2Error:
    msg = bytes(body).decode("utf-8", "replace")
    return Ros2Error(Status(status) if status in Status._value2member_map_ else Status.MALFORMED, msg)


# -- op bodies ---------------------------------------------------------------

OID = struct.Struct("<QQQ")  # container, hi, lo


@dataclass
class UpdateReq:
    container_id: int
    hi: int
    lo: int
    offset: int
    length: int
    checksum: int
    mode: Mode
    rkey: int = 0
    remote_offset: int = 0
    payload: Optional[memoryview] = None

    def encode_head(self) -> bytes:
        w = Writer().raw(OID.pack(self.container_id, self.hi, self.lo))
        w.u64(self.offset).u64(self.length).u32(self.checksum).u8(self.mode)
        if self.mode is Mode.REMOTE:
            w.u64(self.rkey).u64(self.remote_offset)
        return w.getvalue()

    @classmethod
    def decode(cls, body) -> "UpdateReq":
        r = Reader(body)
        cid, hi, lo = OID.unpack(r.raw(OID.size))
        req = cls(cid, hi, lo, r.u64(), r.u64(), r.u32(), Mode(r.u8()))
        if req.mode is Mode.REMOTE:
            req.rkey, req.remote_offset = r.u64(), r.u64()
        else:
            req.payload = r.rest()
        return req


@dataclass
class FetchReq:
    container_id: int
    hi: int
    lo: int
    offset: int
    length: int
    at_epoch: int = LATEST
    mode: Mode = Mode.INLINE
    rkey: int = 0
    remote_offset: int = 0

    def encode(self) -> bytes:
        w = Writer().raw(OID.pack(self.container_id, self.hi, self.lo))
        w.u64(self.offset).u64(self.length).u64(self.at_epoch).u8(self.mode)
        if self.mode is Mode.REMOTE:
            w.u64(self.rkey).u64(self.remote_offset)
        return w.getvalue()

    @classmethod
    def decode(cls, body) -> "FetchReq":
        r = Reader(body)
        cid, hi, lo = OID.unpack(r.raw(OID.size))
        req = cls(cid, hi, lo, r.u64(), r.u64(), r.u64(), Mode(r.u8()))
        if req.mode is Mode.REMOTE:
            req.rkey, req.remote_offset = r.u64(), r.u64()
        return req


EXTENT_INFO = struct.Struct("<QQQIB")


@dataclass
class FetchResp:
    epoch: int
    checksum: int
    mode: Mode
    extents: list[ExtentInfo]
    payload: Optional[memoryview] = None

    def encode_head(self) -> bytes:
        w = Writer().u64(self.epoch).u32(self.checksum).u8(self.mode).u16(len(self.extents))
        for x in self.extents:
            w.raw(EXTENT_INFO.pack(x.offset, x.length, x.epoch, x.checksum, x.tier))
        return w.getvalue()

    @classmethod
    def decode(cls, body) -> "FetchResp":
        r = Reader(body)
        epoch, crc, mode, n = r.u64(), r.u32(), Mode(r.u8()), r.u16()
        exts = []
        for _ in range(n):
            off, length, ep, xcrc, tier = EXTENT_INFO.unpack(r.raw(EXTENT_INFO.size))
            exts.append(ExtentInfo(off, length, ep, xcrc, Tier(tier)))
        resp = cls(epoch, crc, mode, exts)
        if mode is Mode.INLINE:
            resp.payload = r.rest()
        return resp


@dataclass
class PunchReq:
    container_id: int
    hi: int
    lo: int
    offset: int
    length: int

    def encode(self) -> bytes:
        return OID.pack(self.container_id, self.hi, self.lo) + struct.pack("<QQ", self.offset, self.length)

    @classmethod
    def decode(cls, body) -> "PunchReq":
        r = Reader(body)
        return cls(*OID.unpack(r.raw(OID.size)), r.u64(), r.u64())


@dataclass
class CapIssueReq:
    offset: int
    length: int
    perms: int
    ttl: float

    def encode(self) -> bytes:
        return Writer().u64(self.offset).u64(self.length).u8(self.perms).f64(self.ttl).getvalue()

    @classmethod
    def decode(cls, body) -> "CapIssueReq":
        r = Reader(body)
        return cls(r.u64(), r.u64(), r.u8(), r.f64())
