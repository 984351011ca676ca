"""Client side of an engine session.

One :class:`EngineClient` owns a control connection (RPCs, multiplexed by
request id with a reader thread) and a data connection whose queue pair
serves the engine's one-sided reads and writes against client memory.

Bulk requests register the caller's buffer in place for the duration of the
request and hand the engine that region's key; the region carries a TTL so
a key that somehow outlives its request stops working on its own.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional

from ..checksum import crc32c
from ..errors import Ros2Error, Status
from ..store.extents import ExtentInfo
from ..tenancy import CapabilityToken
from ..transport import Channel, ChannelClosed, Endpoint, MemoryRegion, Perm, QueuePair, make_channel
from ..transport.channel import StreamChannel, Tap
from ..transport.memory import ProtectionDomain
from ..wire import F_DATA_ATTACH, F_RESPONSE, F_STAGE2, FrameType, Reader, Writer
from . import rpc
from .rpc import LATEST, Mode, Op

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0
REGION_TTL = 120.0


@dataclass
class Fetched:
    epoch: int
    checksum: int
    extents: list[ExtentInfo]
    nbytes: int


class PendingCall:
    """A request on the wire.  ``result`` waits, runs cleanup, then decodes."""

    __slots__ = ("op", "rid", "event", "status", "body", "decode", "cleanup")

    def __init__(self, op: int, rid: int, decode: Optional[Callable] = None,
                 cleanup: Optional[Callable] = None):
        self.op = op
        self.rid = rid
        self.event = threading.Event()
        self.status = Status.NETWORK
        self.body = b""
        self.decode = decode
        self.cleanup = cleanup

    def _settle(self, status: int, body) -> None:
        self.status = status
        self.body = body
        self.event.set()

    def result(self, timeout: Optional[float] = DEFAULT_TIMEOUT):
        ok = self.event.wait(timeout)
        try:
            if not ok:
                raise Ros2Error(Status.NETWORK, f"{Op(self.op).name} timed out")
            if self.status != Status.OK:
                raise rpc.error_from(self.status, self.body)
            return self.decode(self.body) if self.decode else self.body
        finally:
            if self.cleanup is not None:
                c, self.cleanup = self.cleanup, None
                c()


class EngineClient:
    def __init__(self, ctrl_addr: tuple[str, int], data_addr: tuple[str, int], tenant_id: int,
                 secret: bytes, provider: str = "stream", endpoint: Optional[Endpoint] = None,
                 pd: Optional[ProtectionDomain] = None, tap: Optional[Tap] = None):
        self.ctrl_addr = tuple(ctrl_addr)
        self.data_addr = tuple(data_addr)
        self.tenant_id = tenant_id
        self._secret = secret
        self.provider = provider
        self.endpoint = endpoint or Endpoint(name="client")
        self.pd = pd or self.endpoint.alloc_pd(tenant_id)
        self.tap = tap
        self.session_id = 0
        self.eager_threshold = 0
        self.ctrl: Optional[Channel] = None
        self.qp: Optional[QueuePair] = None
        self.rpc_counts: Counter = Counter()
        self._rids = itertools.count(1)
        self._pending: dict[int, PendingCall] = {}
        self._plock = threading.Lock()
        self._reader: Optional[threading.Thread] = None
        self.closed = False

    # -- session setup ----------------------------------------------------
    def connect(self, timeout: float = 10.0) -> "EngineClient":
        try:
            sock = socket.create_connection(self.ctrl_addr, timeout=timeout)
        except OSError as exc:
            raise Ros2Error(Status.ENGINE_UNREACHABLE, f"{self.ctrl_addr}: {exc}") from None
        ch: Channel = StreamChannel(sock, "control", self.tap)
        try:
            self._authenticate(ch)
            sock.settimeout(None)
            self.ctrl = make_channel(self.provider, sock, "control", self.tap) if self.provider != "stream" else ch
            self._attach_data(timeout)
        except Exception:
            ch.close()
            raise
        self._reader = threading.Thread(target=self._read_loop, name=f"rpc-{self.session_id:x}", daemon=True)
        self._reader.start()
        return self

    def _authenticate(self, ch: Channel) -> None:
        hello = rpc.HELLO.pack(self.tenant_id) + Writer().text(self.provider).getvalue()
        ch.send_frame(FrameType.HELLO, 0, hello)
        status, sid, nonce = rpc.HELLO_ACK.unpack(self._expect(ch, FrameType.HELLO_ACK, rpc.HELLO_ACK.size))
        if status != Status.OK:
            raise Ros2Error(status, "engine refused session")
        mac = rpc.handshake_mac(self._secret, nonce, sid, self.tenant_id)
        ch.send_frame(FrameType.HELLO, F_STAGE2, mac)
        status, token, eager = rpc.STAGE2_ACK.unpack(self._expect(ch, FrameType.HELLO_ACK, rpc.STAGE2_ACK.size))
        if status != Status.OK:
            raise Ros2Error(status, "authentication rejected")
        self.session_id, self._data_token, self.eager_threshold = sid, token, eager

    @staticmethod
    def _expect(ch: Channel, ftype: int, size: int) -> bytes:
        try:
            got, _, payload = ch.recv_frame()
        except ChannelClosed:
            raise Ros2Error(Status.AUTH_FAILED, "engine closed the connection during setup") from None
        if got == FrameType.ERROR:
            _, status = rpc.ERR_HEAD.unpack_from(payload)
            raise rpc.error_from(status, payload[rpc.ERR_HEAD.size :])
        if got != ftype or len(payload) != size:
            raise Ros2Error(Status.MALFORMED, f"unexpected frame {got:#x} during setup")
        return payload

    def _attach_data(self, timeout: float) -> None:
        try:
            sock = socket.create_connection(self.data_addr, timeout=timeout)
        except OSError as exc:
            raise Ros2Error(Status.ENGINE_UNREACHABLE, f"{self.data_addr}: {exc}") from None
        ch = StreamChannel(sock, "data", self.tap)
        try:
            ch.send_frame(FrameType.HELLO, F_DATA_ATTACH, rpc.ATTACH.pack(self.session_id, self._data_token))
            (status,) = rpc.ATTACH_ACK.unpack(self._expect(ch, FrameType.HELLO_ACK, rpc.ATTACH_ACK.size))
            if status != Status.OK:
                raise Ros2Error(status, "data attach rejected")
        except Exception:
            ch.close()
            raise
        sock.settimeout(None)
        self.qp = self.endpoint.attach(make_channel(self.provider, sock, "data", self.tap), self.pd)

    # -- RPC plumbing -----------------------------------------------------
    def _read_loop(self) -> None:
        ch = self.ctrl
        try:
            while True:
                ftype, _, payload = ch.recv_frame()
                if ftype == FrameType.RPC_RESP and len(payload) >= rpc.RESP_HEAD.size:
                    _, rid, status = rpc.RESP_HEAD.unpack_from(payload)
                    body = memoryview(payload)[rpc.RESP_HEAD.size :]
                elif ftype == FrameType.ERROR and len(payload) >= rpc.ERR_HEAD.size:
                    rid, status = rpc.ERR_HEAD.unpack_from(payload)
                    body = memoryview(payload)[rpc.ERR_HEAD.size :]
                else:
                    log.warning("session %x: unexpected frame %#x", self.session_id, ftype)
                    continue
                with self._plock:
                    call = self._pending.pop(rid, None)
                if call is not None:
                    call._settle(status, body)
        except (ChannelClosed, Ros2Error, OSError):
            pass
        finally:
            self.closed = True
            with self._plock:
                calls, self._pending = list(self._pending.values()), {}
            for call in calls:
                call._settle(Status.NETWORK, b"connection to engine lost")

    def submit(self, op: int, *parts, decode=None, cleanup=None) -> PendingCall:
        rid = next(self._rids)
        call = PendingCall(op, rid, decode, cleanup)
        if self.closed or self.ctrl is None:
            call._settle(Status.NETWORK, b"session closed")
            return call
        with self._plock:
            self._pending[rid] = call
        try:
            self.ctrl.send_frame(FrameType.RPC_REQ, 0, rpc.REQ_HEAD.pack(op, rid), *parts)
        except ChannelClosed:
            with self._plock:
                self._pending.pop(rid, None)
            call._settle(Status.NETWORK, b"connection to engine lost")
        self.rpc_counts[Op(op).name if op in Op._value2member_map_ else op] += 1
        return call

    def call(self, op: int, *parts, decode=None, timeout: Optional[float] = DEFAULT_TIMEOUT):
        return self.submit(op, *parts, decode=decode).result(timeout)

    # -- typed operations -------------------------------------------------
    def ping(self, data: bytes = b"") -> bytes:
        return bytes(self.call(Op.PING, data))

    def pool_connect(self) -> tuple[int, int, int]:
        r = Reader(self.call(Op.POOL_CONNECT))
        return r.u64(), r.u64(), r.u64()

    def cont_open(self, name: str, create: bool = True) -> int:
        r = Reader(self.call(Op.CONT_OPEN, Writer().text(name).u8(int(create)).getvalue()))
        return r.u64()

    def snapshot(self, container_id: int) -> int:
        return Reader(self.call(Op.CONT_SNAPSHOT, Writer().u64(container_id).getvalue())).u64()

    def flush(self) -> None:
        self.call(Op.OBJ_FLUSH)

    def punch(self, cid: int, hi: int, lo: int, offset: int, length: int) -> int:
        return Reader(self.call(Op.OBJ_PUNCH, rpc.PunchReq(cid, hi, lo, offset, length).encode())).u64()

    def update_async(self, cid: int, hi: int, lo: int, offset: int, data,
                     checksum: Optional[int] = None) -> PendingCall:
        """Write ``data`` at ``offset``; eager below the threshold, else the
        engine pulls it with a one-sided read from our registered buffer."""
        view = memoryview(data).cast("B")
        n = len(view)
        crc = crc32c(view) if checksum is None else checksum
        decode = _epoch
        if n < self.eager_threshold:
            req = rpc.UpdateReq(cid, hi, lo, offset, n, crc, Mode.INLINE)
            return self.submit(Op.OBJ_UPDATE, req.encode_head(), view, decode=decode)
        mr = self._register(view, Perm.REMOTE_READ)
        req = rpc.UpdateReq(cid, hi, lo, offset, n, crc, Mode.REMOTE, mr.rkey, 0)
        return self.submit(Op.OBJ_UPDATE, req.encode_head(), decode=decode,
                           cleanup=lambda: self.endpoint.deregister(mr))

    def update(self, cid: int, hi: int, lo: int, offset: int, data, checksum: Optional[int] = None) -> int:
        return self.update_async(cid, hi, lo, offset, data, checksum).result()

    def fetch_async(self, cid: int, hi: int, lo: int, offset: int, dst: memoryview,
                    at_epoch: Optional[int] = None, sink: Optional[tuple[int, int]] = None) -> PendingCall:
        """Fetch ``len(dst)`` bytes into ``dst`` and verify their checksum.

        ``sink`` overrides the (rkey, offset) the engine writes to; it exists
        so tests can aim the engine at memory this client does not own.
        """
        n = len(dst)
        epoch = LATEST if at_epoch is None else at_epoch
        if n < self.eager_threshold:
            req = rpc.FetchReq(cid, hi, lo, offset, n, epoch)

            def decode(body):
                resp = rpc.FetchResp.decode(body)
                if len(resp.payload) != n:
                    raise Ros2Error(Status.MALFORMED, "inline payload has the wrong length")
                if crc32c(resp.payload) != resp.checksum:
                    raise Ros2Error(Status.CHECKSUM_MISMATCH, "inline fetch payload failed its checksum")
                dst[:] = resp.payload
                return Fetched(resp.epoch, resp.checksum, resp.extents, n)

            return self.submit(Op.OBJ_FETCH, req.encode(), decode=decode)
        mr = None
        if sink is None:
            mr = self._register(dst, Perm.REMOTE_WRITE)
            sink = (mr.rkey, 0)
        req = rpc.FetchReq(cid, hi, lo, offset, n, epoch, Mode.REMOTE, *sink)

        def decode_remote(body):
            resp = rpc.FetchResp.decode(body)
            if crc32c(dst) != resp.checksum:
                raise Ros2Error(Status.CHECKSUM_MISMATCH, "fetched bytes failed their checksum")
            return Fetched(resp.epoch, resp.checksum, resp.extents, n)

        cleanup = (lambda: self.endpoint.deregister(mr)) if mr is not None else None
        return self.submit(Op.OBJ_FETCH, req.encode(), decode=decode_remote, cleanup=cleanup)

    def fetch(self, cid: int, hi: int, lo: int, offset: int, length: int,
              at_epoch: Optional[int] = None) -> tuple[bytearray, Fetched]:
        buf = bytearray(length)
        info = self.fetch_async(cid, hi, lo, offset, memoryview(buf), at_epoch).result()
        return buf, info

    def cap_issue(self, offset: int, length: int, perms: Perm, ttl: float = 0) -> tuple[CapabilityToken, int]:
        """Ask the engine for a scoped token over this session's engine-side window."""
        body = self.call(Op.CAP_ISSUE, rpc.CapIssueReq(offset, length, int(perms), ttl).encode())
        tok = CapabilityToken.decode(body, self.tenant_id)
        window = Reader(memoryview(body)[rpc.TOKEN_RECORD_SIZE :]).u64()
        return tok, window

    def cap_revoke(self, token_id: int) -> None:
        self.call(Op.CAP_REVOKE, Writer().u64(token_id).getvalue())

    def _register(self, view: memoryview, perms: Perm) -> MemoryRegion:
        return self.endpoint.register_memory(self.pd, len(view), perms, ttl=REGION_TTL, buffer=view)

    # -- teardown ---------------------------------------------------------
    def close(self) -> None:
        if self.ctrl is not None and not self.closed:
            try:
                self.submit(Op.CLOSE).result(5)
            except Ros2Error:
                pass
        self.closed = True
        if self.ctrl is not None:
            self.ctrl.close()
        if self.qp is not None:
            self.qp.close()
        if self._reader is not None and self._reader is not threading.current_thread():
            self._reader.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _epoch(body) -> int:
    return Reader(body).u64()
