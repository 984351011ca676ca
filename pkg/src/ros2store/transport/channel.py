"""Byte-stream channels that carry WireFrames, one per provider.

``stream`` is the TCP analog: every frame is received with separate header
and payload reads, sends are copied into a staging buffer first, and bytes
bound for a registered region land in a staging buffer and are then copied
into place.

``rdmasim`` is the RDMA analog: it keeps a pre-registered receive ring that
is refilled with large ``recv_into`` calls (so one syscall usually yields a
whole frame, or several), sends are scatter-gather, and bytes bound for a
registered region are received straight into that region's memory.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from ..errors import Ros2Error, Status
from ..wire import HEADER_SIZE, decode_header, encode_header

log = logging.getLogger(__name__)

PROVIDERS = ("stream", "rdmasim")
RING_SIZE = 256 << 10


class ChannelClosed(Ros2Error):
    def __init__(self, message: str = "connection closed"):
        super().__init__(Status.NETWORK, message)

    def __reduce__(self):
        return (self.__class__, (self.message,))


@dataclass
class FrameEvent:
    """What a wire tap sees for each frame."""

    direction: str  # "tx" | "rx"
    plane: str
    type: int
    flags: int
    length: int
    payload: bytes


Tap = Callable[[FrameEvent], None]


class Channel:
    provider = "base"

    def __init__(self, sock: socket.socket, plane: str = "data", tap: Optional[Tap] = None):
        self.sock = sock
        self.plane = plane
        self.tap = tap
        self._send_lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0
        self.frames_sent = 0
        self.frames_received = 0
        self.closed = False
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass  # unix sockets

    # -- sending ---------------------------------------------------------
    def send_frame(self, ftype: int, flags: int = 0, *parts) -> None:
        length = sum(len(p) for p in parts)
        header = encode_header(ftype, flags, length)
        with self._send_lock:
            if self.closed:
                raise ChannelClosed()
            try:
                self._send(header, parts)
            except OSError as exc:
                self.closed = True
                raise ChannelClosed(str(exc)) from None
            self.bytes_sent += HEADER_SIZE + length
            self.frames_sent += 1
        if self.tap is not None:
            self.tap(FrameEvent("tx", self.plane, ftype, flags, length, b"".join(bytes(p) for p in parts)))

    def _send(self, header: bytes, parts) -> None:
        raise NotImplementedError

    # -- receiving (single reader thread) ---------------------------------
    def recv_header(self) -> tuple[int, int, int]:
        ftype, flags, length = decode_header(self._recv_exact(HEADER_SIZE))
        self.bytes_received += HEADER_SIZE
        self.frames_received += 1
        return ftype, flags, length

    def recv_payload(self, n: int) -> bytes:
        data = bytes(self._recv_exact(n)) if n else b""
        self.bytes_received += n
        return data

    def recv_payload_into(self, view: memoryview) -> None:
        """Receive ``len(view)`` payload bytes into caller memory."""
        raise NotImplementedError

    def discard(self, n: int) -> None:
        while n:
            chunk = min(n, 1 << 20)
            self.recv_payload(chunk)
            n -= chunk

    def recv_frame(self) -> tuple[int, int, bytes]:
        ftype, flags, length = self.recv_header()
        payload = self.recv_payload(length)
        self.tap_rx(ftype, flags, payload)
        return ftype, flags, payload

    def tap_rx(self, ftype: int, flags: int, payload) -> None:
        if self.tap is not None:
            self.tap(FrameEvent("rx", self.plane, ftype, flags, len(payload), bytes(payload)))

    def _recv_exact(self, n: int):
        raise NotImplementedError

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def _fill(sock: socket.socket, view: memoryview) -> None:
    got = 0
    n = len(view)
    while got < n:
        try:
            r = sock.recv_into(view[got:], n - got)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from None
        if r == 0:
            raise ChannelClosed()
        got += r


class StreamChannel(Channel):
    provider = "stream"

    def __init__(self, sock: socket.socket, plane: str = "data", tap: Optional[Tap] = None):
        super().__init__(sock, plane, tap)
        # reusable staging buffers standing in for kernel socket buffers
        self._tx = bytearray(64 << 10)
        self._rx = bytearray(64 << 10)

    def _send(self, header: bytes, parts) -> None:
        total = len(header) + sum(len(p) for p in parts)
        if len(self._tx) < total:
            self._tx = bytearray(total)
        tx = memoryview(self._tx)
        tx[: len(header)] = header
        pos = len(header)
        for p in parts:
            n = len(p)
            tx[pos : pos + n] = p
            pos += n
        self.sock.sendall(tx[:total])

    def _recv_exact(self, n: int):
        buf = bytearray(n)
        _fill(self.sock, memoryview(buf))
        return buf

    def recv_payload_into(self, view: memoryview) -> None:
        n = len(view)
        if len(self._rx) < n:
            self._rx = bytearray(n)
        staged = memoryview(self._rx)[:n]
        _fill(self.sock, staged)
        view[:] = staged
        self.bytes_received += n


class RdmaSimChannel(Channel):
    provider = "rdmasim"

    def __init__(self, sock: socket.socket, plane: str = "data", tap: Optional[Tap] = None):
        super().__init__(sock, plane, tap)
        self._ring = bytearray(RING_SIZE)
        self._view = memoryview(self._ring)
        self._start = 0
        self._end = 0

    def _send(self, header: bytes, parts) -> None:
        bufs = [memoryview(header)] + [m for m in (memoryview(p).cast("B") for p in parts) if len(m)]
        total = sum(len(b) for b in bufs)
        try:
            sent = self.sock.sendmsg(bufs)
        except InterruptedError:
            sent = 0
        if sent == total:  # the common case: the kernel took the whole frame
            return
        while bufs:
            while sent and bufs:
                if sent >= len(bufs[0]):
                    sent -= len(bufs[0])
                    bufs.pop(0)
                else:
                    bufs[0] = bufs[0][sent:]
                    sent = 0
            if not bufs:
                return
            try:
                sent = self.sock.sendmsg(bufs)
            except InterruptedError:
                sent = 0

    def _buffered(self) -> int:
        return self._end - self._start

    def _refill(self, want: int) -> None:
        """Make at least ``want`` (<= RING_SIZE) bytes available in the ring."""
        if self._start and RING_SIZE - self._start < want:
            n = self._buffered()
            self._ring[:n] = self._ring[self._start : self._end]
            self._start, self._end = 0, n
        while self._buffered() < want:
            try:
                r = self.sock.recv_into(self._view[self._end :])
            except OSError as exc:
                raise ChannelClosed(str(exc)) from None
            if r == 0:
                raise ChannelClosed()
            self._end += r

    def _recv_exact(self, n: int):
        if n <= RING_SIZE:
            if self._buffered() < n:
                self._refill(n)
            out = self._view[self._start : self._start + n]
            self._start += n
            if self._start == self._end:
                self._start = self._end = 0
            return out
        buf = bytearray(n)
        self._into(memoryview(buf))
        return buf

    def recv_payload_into(self, view: memoryview) -> None:
        self._into(view)
        self.bytes_received += len(view)

    def _into(self, view: memoryview) -> None:
        n = len(view)
        have = min(self._buffered(), n)
        if have:
            view[:have] = self._view[self._start : self._start + have]
            self._start += have
            if self._start == self._end:
                self._start = self._end = 0
        if have < n:
            _fill(self.sock, view[have:])


def make_channel(provider: str, sock: socket.socket, plane: str = "data", tap: Optional[Tap] = None) -> Channel:
    if provider == "stream":
        return StreamChannel(sock, plane, tap)
    if provider == "rdmasim":
        return RdmaSimChannel(sock, plane, tap)
    raise Ros2Error(Status.UNSUPPORTED, f"unknown provider {provider!r}")


def loopback_pair(provider: str, tap_a: Optional[Tap] = None, tap_b: Optional[Tap] = None,
                  plane: str = "data") -> tuple[Channel, Channel]:
    """Two connected channels over a real 127.0.0.1 TCP connection."""
    with socket.create_server(("127.0.0.1", 0)) as srv:
        a = socket.create_connection(srv.getsockname())
        b, _ = srv.accept()
    return make_channel(provider, a, plane, tap_a), make_channel(provider, b, plane, tap_b)
