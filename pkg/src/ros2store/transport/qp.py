"""Endpoints and queue pairs.

An :class:`Endpoint` is the local "NIC": it owns protection domains,
registered regions and the remote-key table.  A :class:`QueuePair` binds
one connected channel to one local protection domain.  Each QP runs a
service thread that answers the peer's one-sided requests against local
memory (validating every access through the key table) and routes
responses back to the local initiator.

Initiator operations on one QP are serialized: one request is in flight
per direction, and its response is awaited before the next one starts.
"""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import struct
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Union

from ..checksum import crc32c
from ..clock import SYSTEM_CLOCK
from ..errors import Ros2Error, Status
from ..wire import F_MESSAGE, F_RESPONSE, F_SINK, FrameType, MalformedFrame
from .channel import Channel, ChannelClosed
from .memory import (
    Access,
    Decision,
    KeyEntry,
    KeyTable,
    MemoryRegion,
    Perm,
    ProtectionDomain,
    check_local,
)

log = logging.getLogger(__name__)

DEFAULT_EAGER_THRESHOLD = 16 << 10

REQ = struct.Struct("<QQQQ")  # req_id, rkey, offset, length
RESP = struct.Struct("<QHHIQ")  # req_id, status, reason, crc, bytes
NOTIFY = struct.Struct("<QQQQI")  # req_id, rkey, offset, length, crc

_qp_ids = itertools.count(1)
_lkeys = itertools.count(1)  # local keys never leave the endpoint


class Op(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    SEND = "SEND"
    RECV = "RECV"


class QPState(enum.Enum):
    INIT = "INIT"
    READY = "READY"
    ERROR = "ERROR"


# DENY reason -> completion status
_STATUS_FOR_REASON = {
    Status.UNKNOWN_KEY: Status.REMOTE_ACCESS,
    Status.REVOKED: Status.REMOTE_ACCESS,
    Status.EXPIRED: Status.EXPIRED,
    Status.OUT_OF_BOUNDS: Status.OUT_OF_BOUNDS,
    Status.PERM: Status.PERM,
}


@dataclass(frozen=True)
class Completion:
    op: Op
    status: Status
    bytes: int = 0
    checksum: Optional[int] = None
    reason: Optional[Status] = None

    @property
    def ok(self) -> bool:
        return self.status == Status.OK

    @classmethod
    def failed(cls, op: Op, reason: Status) -> "Completion":
        return cls(op, _STATUS_FOR_REASON.get(reason, reason), 0, None, reason)


@dataclass(frozen=True)
class TransferPolicy:
    eager_threshold: int = DEFAULT_EAGER_THRESHOLD
    provider: str = "stream"

    def is_eager(self, nbytes: int) -> bool:
        return nbytes < self.eager_threshold


@dataclass(frozen=True)
class Sink:
    """Where a transfer should land on the peer: ``(rkey, offset, length)``."""

    rkey: int
    offset: int
    length: int


@dataclass(frozen=True)
class Notification:
    """Target-side record of a completed eager placement or rendezvous notify."""

    kind: str  # "eager" | "rendezvous"
    rkey: int
    offset: int
    length: int
    status: Status
    checksum: Optional[int] = None


class Endpoint:
    def __init__(self, clock=SYSTEM_CLOCK, name: str = ""):
        self.clock = clock
        self.name = name
        self.keys = KeyTable(clock)
        self.regions: dict[int, MemoryRegion] = {}
        self._lock = threading.Lock()

    def alloc_pd(self, tenant_id: int) -> ProtectionDomain:
        return ProtectionDomain(tenant_id)

    def dealloc_pd(self, pd: ProtectionDomain) -> None:
        pd.alive = False
        for mr in [m for m in list(self.regions.values()) if m.pd is pd]:
            self.deregister(mr)

    def register_memory(self, pd: ProtectionDomain, length: int, perms: Perm, ttl: float = 0,
                        buffer=None) -> MemoryRegion:
        """Register ``length`` fresh bytes, or an existing ``buffer`` in place."""
        if buffer is not None:
            mv = memoryview(buffer)
            if mv.nbytes != length:
                raise Ros2Error(Status.MISMATCH, f"buffer is {mv.nbytes} bytes, not {length}")
            if mv.readonly and Perm(perms) & Perm.REMOTE_WRITE:
                raise Ros2Error(Status.INVALID_ARGUMENT, "read-only buffer cannot take remote writes")
        if length <= 0:
            raise Ros2Error(Status.ZERO_LENGTH, "cannot register an empty region")
        if not pd.alive:
            raise Ros2Error(Status.PD_DEAD, f"protection domain {pd.pd_id} is gone")
        perms = Perm(perms)
        if perms == Perm.NONE:
            # local-only: usable as a source/destination of our own ops, no rkey
            mr = MemoryRegion(pd, length, perms, next(_lkeys), 0, self.clock.now(), ttl, backing=buffer)
            with self._lock:
                self.regions[mr.mr_id] = mr
            return mr
        rkey = self.keys.mint()
        mr = MemoryRegion(pd, length, perms, next(_lkeys), rkey, self.clock.now(), ttl, backing=buffer)
        self.keys.add(KeyEntry(rkey, mr, 0, length, perms, None))
        with self._lock:
            self.regions[mr.mr_id] = mr
        return mr

    def deregister(self, mr: MemoryRegion) -> None:
        mr.live = False
        self.keys.retire_region(mr)
        with self._lock:
            self.regions.pop(mr.mr_id, None)

    def validate_access(self, rkey: int, offset: int, length: int, kind: Access,
                        now: Optional[float] = None, pd: Optional[ProtectionDomain] = None) -> Decision:
        return self.keys.validate(rkey, offset, length, kind, now, pd)

    def attach(self, channel: Channel, pd: ProtectionDomain, peer: str = "") -> "QueuePair":
        qp = QueuePair(self, pd, channel, peer)
        qp.start()
        return qp


class _Pending:
    __slots__ = ("req_id", "dst", "event", "status", "reason", "nbytes", "crc")

    def __init__(self, req_id: int, dst: Optional[memoryview] = None):
        self.req_id = req_id
        self.dst = dst
        self.event = threading.Event()
        self.status = Status.NETWORK
        self.reason: Optional[Status] = Status.NETWORK
        self.nbytes = 0
        self.crc = 0


_CLOSED = object()


class QueuePair:
    def __init__(self, endpoint: Endpoint, pd: ProtectionDomain, channel: Channel, peer: str = ""):
        self.qp_id = next(_qp_ids)
        self.endpoint = endpoint
        self.pd = pd
        self.channel = channel
        if not peer:
            try:
                peer = "%s:%s" % channel.sock.getpeername()[:2]
            except (OSError, TypeError):
                peer = "?"
        self.peer = peer
        self.state = QPState.INIT
        self.stats: Counter = Counter()
        self._op_lock = threading.Lock()
        self._slot: Optional[_Pending] = None
        self._req_ids = itertools.count(1)
        self._recvq: queue.Queue = queue.Queue()
        self._notifyq: queue.Queue = queue.Queue()
        self._thread: Optional[threading.Thread] = None

    @property
    def tenant_id(self) -> int:
        return self.pd.tenant_id

    def start(self) -> None:
        self.state = QPState.READY
        self._thread = threading.Thread(target=self._serve, name=f"qp{self.qp_id}", daemon=True)
        self._thread.start()

    def close(self) -> None:
        self.state = QPState.ERROR
        self.channel.close()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=5)

    # -- initiator side ---------------------------------------------------
    def _send(self, ftype: int, flags: int, *parts) -> None:
        self.channel.send_frame(ftype, flags, *parts)
        self.stats[FrameType(ftype).name] += 1

    def _roundtrip(self, op: Op, ftype: int, flags: int, parts, dst: Optional[memoryview] = None,
                   timeout: Optional[float] = None) -> _Pending:
        req_id = next(self._req_ids)
        slot = _Pending(req_id, dst)
        self._slot = slot
        try:
            self._send(ftype, flags, REQ.pack(req_id, *parts[0]), *parts[1:])
        except ChannelClosed:
            self._to_error()
            return slot
        if not slot.event.wait(timeout):
            slot.status = slot.reason = Status.NETWORK
        self._slot = None
        return slot

    def _ready(self, op: Op) -> Optional[Completion]:
        if self.state is not QPState.READY:
            return Completion(op, Status.NETWORK, reason=Status.QP_STATE)
        return None

    def one_sided_write(self, src: MemoryRegion, src_offset: int, rkey: int, remote_offset: int,
                        length: int, timeout: Optional[float] = None) -> Completion:
        """Place ``src[src_offset:+length]`` at the peer's ``(rkey, remote_offset)``."""
        bad = self._ready(Op.WRITE)
        if bad:
            return bad
        try:
            check_local(src, src_offset, length)
        except Ros2Error as exc:
            return Completion(Op.WRITE, exc.status, reason=exc.status)
        if length == 0:
            return Completion(Op.WRITE, Status.OK, 0)
        data = src.view[src_offset : src_offset + length]
        with self._op_lock:
            slot = self._roundtrip(Op.WRITE, FrameType.ONESIDED_DATA, 0,
                                   [(rkey, remote_offset, length), data], timeout=timeout)
        return self._complete(Op.WRITE, slot)

    def one_sided_read(self, dst: MemoryRegion, dst_offset: int, rkey: int, remote_offset: int,
                       length: int, timeout: Optional[float] = None) -> Completion:
        """Fetch the peer's ``(rkey, remote_offset)`` into ``dst[dst_offset:+length]``."""
        bad = self._ready(Op.READ)
        if bad:
            return bad
        try:
            check_local(dst, dst_offset, length)
        except Ros2Error as exc:
            return Completion(Op.READ, exc.status, reason=exc.status)
        if length == 0:
            return Completion(Op.READ, Status.OK, 0)
        view = dst.view[dst_offset : dst_offset + length]
        with self._op_lock:
            slot = self._roundtrip(Op.READ, FrameType.ONESIDED_READ_REQ, 0,
                                   [(rkey, remote_offset, length)], dst=view, timeout=timeout)
        return self._complete(Op.READ, slot)

    def _complete(self, op: Op, slot: _Pending) -> Completion:
        if slot.status == Status.OK:
            return Completion(op, Status.OK, slot.nbytes, slot.crc or None)
        if slot.status == Status.NETWORK:
            return Completion(op, Status.NETWORK, 0, None, slot.reason)
        return Completion(op, slot.status, 0, None, slot.reason)

    def post_send(self, message) -> Completion:
        bad = self._ready(Op.SEND)
        if bad:
            return bad
        try:
            self._send(FrameType.EAGER_DATA, F_MESSAGE, message)
        except ChannelClosed:
            self._to_error()
            return Completion(Op.SEND, Status.NETWORK, reason=Status.NETWORK)
        return Completion(Op.SEND, Status.OK, len(message))

    def post_recv(self, timeout: Optional[float] = None) -> tuple[bytes, Completion]:
        try:
            item = self._recvq.get(timeout=timeout)
        except queue.Empty:
            return b"", Completion(Op.RECV, Status.NETWORK, reason=Status.NETWORK)
        if item is _CLOSED:
            self._recvq.put(_CLOSED)
            return b"", Completion(Op.RECV, Status.NETWORK, reason=Status.NETWORK)
        return item, Completion(Op.RECV, Status.OK, len(item))

    def poll_notification(self, timeout: Optional[float] = None) -> Optional[Notification]:
        try:
            return self._notifyq.get(timeout=timeout)
        except queue.Empty:
            return None

    def transfer(self, policy: TransferPolicy, payload: Union[bytes, bytearray, memoryview, tuple],
                 sink: Sink, timeout: Optional[float] = None) -> Completion:
        """Move ``payload`` into the peer's ``sink``, eager or rendezvous by size.

        ``payload`` is either a bytes-like object or ``(region, offset, length)``
        naming registered local memory.  Below the eager threshold the bytes
        ride inline in one EAGER_DATA frame; at or above it they are placed
        with a one-sided write and followed by an RDV_NOTIFY carrying the
        CRC32C, which the target checks against what landed.
        """
        if isinstance(payload, tuple):
            region, off, n = payload
            check_local(region, off, n)
            data = region.view[off : off + n]
        else:
            region, off, data = None, 0, memoryview(payload).cast("B")
            n = len(data)
        if n != sink.length:
            raise Ros2Error(Status.MISMATCH, f"payload is {n} bytes, sink is {sink.length}")
        crc = crc32c(data)
        if policy.is_eager(n):
            bad = self._ready(Op.SEND)
            if bad:
                return bad
            with self._op_lock:
                slot = self._roundtrip(Op.SEND, FrameType.EAGER_DATA, F_SINK,
                                       [(sink.rkey, sink.offset, n), data], timeout=timeout)
            c = self._complete(Op.SEND, slot)
            return Completion(c.op, c.status, c.bytes, crc if c.ok else None, c.reason)
        staged = None
        if region is None:
            staged = self.endpoint.register_memory(self.pd, n, Perm.REMOTE_READ)
            staged.view[:] = data
            region, off = staged, 0
        try:
            c = self.one_sided_write(region, off, sink.rkey, sink.offset, n, timeout=timeout)
        finally:
            if staged is not None:
                self.endpoint.deregister(staged)
        if not c.ok:
            return c
        with self._op_lock:
            req_id = next(self._req_ids)
            slot = _Pending(req_id)
            self._slot = slot
            try:
                self._send(FrameType.RDV_NOTIFY, 0, NOTIFY.pack(req_id, sink.rkey, sink.offset, n, crc))
            except ChannelClosed:
                self._to_error()
            else:
                if not slot.event.wait(timeout):
                    slot.status = slot.reason = Status.NETWORK
            self._slot = None
        c = self._complete(Op.WRITE, slot)
        return Completion(Op.WRITE, c.status, n if c.ok else 0, crc if c.ok else None, c.reason)

    # -- target side (service thread) -----------------------------------
    def _serve(self) -> None:
        ch = self.channel
        try:
            while True:
                ftype, flags, length = ch.recv_header()
                if flags & F_RESPONSE:
                    self._on_response(ftype, flags, length)
                elif ftype == FrameType.ONESIDED_DATA:
                    self._serve_write(length)
                elif ftype == FrameType.ONESIDED_READ_REQ:
                    self._serve_read(length)
                elif ftype == FrameType.EAGER_DATA and flags & F_SINK:
                    self._serve_sink(length)
                elif ftype == FrameType.EAGER_DATA:
                    msg = ch.recv_payload(length)
                    ch.tap_rx(ftype, flags, msg)
                    self._recvq.put(msg)
                elif ftype == FrameType.RDV_NOTIFY:
                    self._serve_notify(length)
                else:
                    ch.discard(length)
                    ch.send_frame(FrameType.ERROR, 0, struct.pack("<H", Status.UNSUPPORTED))
        except (ChannelClosed, MalformedFrame, OSError) as exc:
            if self.state is QPState.READY:
                log.debug("qp %d: channel down: %s", self.qp_id, exc)
        finally:
            self._to_error()

    def _to_error(self) -> None:
        self.state = QPState.ERROR
        self.channel.closed = True
        slot = self._slot
        if slot is not None:
            slot.status = slot.reason = Status.NETWORK
            slot.event.set()
        self._recvq.put(_CLOSED)

    def _read_req(self, length: int, with_data: bool):
        rec = self.channel.recv_payload(REQ.size)
        req_id, rkey, offset, n = REQ.unpack(rec)
        if (length - REQ.size) != (n if with_data else 0):
            raise MalformedFrame("request length disagrees with frame")
        return rec, req_id, rkey, offset, n

    def _reply(self, ftype: int, req_id: int, status: Status, reason: Optional[Status], n: int,
               data=None, crc: int = 0) -> None:
        rec = RESP.pack(req_id, status, reason or 0, crc, n)
        if data is None:
            self.channel.send_frame(ftype, F_RESPONSE, rec)
        else:
            self.channel.send_frame(ftype, F_RESPONSE, rec, data)

    def _place(self, ftype: int, flags: int, length: int) -> tuple[int, Decision, int, int, int]:
        ch = self.channel
        rec, req_id, rkey, offset, n = self._read_req(length, True)
        d, entry = self.endpoint.keys.acquire(rkey, offset, n, Access.WRITE, pd=self.pd)
        if entry is None:
            ch.discard(n)
            if ch.tap is not None:
                ch.tap_rx(ftype, flags, rec)
            return req_id, d, rkey, offset, n
        try:
            view = entry.region.view[offset : offset + n]
            ch.recv_payload_into(view)
            if ch.tap is not None:
                ch.tap_rx(ftype, flags, rec + bytes(view))
        finally:
            self.endpoint.keys.release(entry)
        return req_id, d, rkey, offset, n

    def _serve_write(self, length: int) -> None:
        req_id, d, _, _, n = self._place(FrameType.ONESIDED_DATA, 0, length)
        if d.allowed:
            self._reply(FrameType.ONESIDED_DATA, req_id, Status.OK, None, n)
        else:
            self._reply(FrameType.ONESIDED_DATA, req_id, _STATUS_FOR_REASON[d.reason], d.reason, 0)

    def _serve_sink(self, length: int) -> None:
        req_id, d, rkey, offset, n = self._place(FrameType.EAGER_DATA, F_SINK, length)
        if d.allowed:
            self._reply(FrameType.EAGER_DATA, req_id, Status.OK, None, n)
            self._notifyq.put(Notification("eager", rkey, offset, n, Status.OK))
        else:
            self._reply(FrameType.EAGER_DATA, req_id, _STATUS_FOR_REASON[d.reason], d.reason, 0)

    def _serve_read(self, length: int) -> None:
        rec, req_id, rkey, offset, n = self._read_req(length, False)
        if self.channel.tap is not None:
            self.channel.tap_rx(FrameType.ONESIDED_READ_REQ, 0, rec)
        d, entry = self.endpoint.keys.acquire(rkey, offset, n, Access.READ, pd=self.pd)
        if entry is None:
            self._reply(FrameType.ONESIDED_DATA, req_id, _STATUS_FOR_REASON[d.reason], d.reason, 0)
            return
        try:
            self._reply(FrameType.ONESIDED_DATA, req_id, Status.OK, None, n,
                        data=entry.region.view[offset : offset + n])
        finally:
            self.endpoint.keys.release(entry)

    def _serve_notify(self, length: int) -> None:
        ch = self.channel
        if length != NOTIFY.size:
            raise MalformedFrame("bad RDV_NOTIFY length")
        rec = ch.recv_payload(length)
        ch.tap_rx(FrameType.RDV_NOTIFY, 0, rec)
        req_id, rkey, offset, n, crc = NOTIFY.unpack(rec)
        d, entry = self.endpoint.keys.acquire(rkey, offset, n, Access.WRITE, pd=self.pd)
        if entry is None:
            status = _STATUS_FOR_REASON[d.reason]
            reason = d.reason
        else:
            try:
                landed = crc32c(entry.region.view[offset : offset + n])
            finally:
                self.endpoint.keys.release(entry)
            status = reason = Status.OK if landed == crc else Status.CHECKSUM_MISMATCH
        self._reply(FrameType.RDV_NOTIFY, req_id, status, None if status == Status.OK else reason,
                    n if status == Status.OK else 0, crc=crc)
        self._notifyq.put(Notification("rendezvous", rkey, offset, n, status, crc))

    def _on_response(self, ftype: int, flags: int, length: int) -> None:
        ch = self.channel
        if length < RESP.size:
            raise MalformedFrame("short response")
        rec = ch.recv_payload(RESP.size)
        req_id, status, reason, crc, n = RESP.unpack(rec)
        extra = length - RESP.size
        slot = self._slot
        if slot is None or slot.req_id != req_id:
            ch.discard(extra)
            log.warning("qp %d: stray response %d", self.qp_id, req_id)
            return
        if extra:
            if status != Status.OK or slot.dst is None or extra != len(slot.dst):
                ch.discard(extra)
                status, reason = Status.NETWORK, Status.MALFORMED
            else:
                ch.recv_payload_into(slot.dst)
        if ch.tap is not None:
            ch.tap_rx(ftype, flags, rec + (bytes(slot.dst) if extra and slot.dst is not None else b""))
        slot.status = Status(status)
        slot.reason = Status(reason) if reason else None
        slot.nbytes = n
        slot.crc = crc
        slot.event.set()
