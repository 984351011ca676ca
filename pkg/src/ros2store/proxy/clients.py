"""Two implementations of one digest-level file contract.

``InlineClient`` runs the file layer in-process.  ``OffloadClient`` sends
each operation to a proxy process over the shim channel and gets back
statuses, counts and CRCs.  Both answer every call identically, so a
workload script cannot tell which one it is talking to.
"""

from __future__ import annotations

import itertools
import json
import random
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from ..checksum import crc32c, crc32c_combine
from ..dfs import Kind, Mount
from ..dfs.layout import DEFAULT_CHUNK
from ..engine.client import EngineClient
from ..errors import Ros2Error, Status
from ..transport.channel import ChannelClosed, StreamChannel
from ..wire import FrameType
from . import shim
from .shim import ShimCommand, ShimOp, ShimReply, pattern_bytes

MODES = ("inline", "offload")
SHIM_TIMEOUT = 300.0


@dataclass(frozen=True)
class StatInfo:
    kind: Kind
    size: int
    mode: int
    mtime: int

    @property
    def is_dir(self) -> bool:
        return self.kind is Kind.DIR


@dataclass
class JobSummary:
    """What a proxy-run job reports: totals plus latency percentiles (µs)."""

    ops: int
    bytes: int
    seconds: float
    p50_us: Optional[float]
    p95_us: Optional[float]
    p99_us: Optional[float]
    error: Optional[str] = None

    def encode(self) -> bytes:
        return json.dumps(self.__dict__, separators=(",", ":")).encode()

    @classmethod
    def decode(cls, raw: bytes) -> "JobSummary":
        return cls(**json.loads(raw))


class BufferPool:
    """A fixed budget of staging slabs; callers block while all are out."""

    def __init__(self, capacity: int, slabs: int):
        if capacity <= 0 or slabs <= 0:
            raise Ros2Error(Status.INVALID_ARGUMENT, "buffer pool needs a positive size and slab count")
        self.slab_size = max(4096, capacity // slabs) & ~0xFFF
        self.capacity = self.slab_size * slabs
        self._free: list[bytearray] = []
        self._made = 0
        self._limit = slabs
        self._cv = threading.Condition()

    def acquire(self) -> bytearray:
        with self._cv:
            while not self._free and self._made >= self._limit:
                self._cv.wait()
            if self._free:
                return self._free.pop()
            self._made += 1
        return bytearray(self.slab_size)

    def release(self, slab: bytearray) -> None:
        with self._cv:
            self._free.append(slab)
            self._cv.notify()


class _Slab:
    def __init__(self, pool: BufferPool):
        self.pool = pool

    def __enter__(self) -> bytearray:
        self.slab = self.pool.acquire()
        return self.slab

    def __exit__(self, *exc):
        self.pool.release(self.slab)


class InlineClient:
    """The file layer in this process, answering with digests.

    Several clients may share one engine session and one ``mounts`` cache;
    each keeps its own handle table.  With a ``buffers`` pool, data moves
    through pool slabs one piece at a time and CRCs are stitched together.
    """

    def __init__(self, engine: EngineClient, owns_engine: bool = False,
                 mounts: Optional[dict[str, Mount]] = None, buffers: Optional[BufferPool] = None,
                 chunk_size: int = DEFAULT_CHUNK, window: int = 8):
        self.engine = engine
        self.owns_engine = owns_engine
        self.mounts = mounts if mounts is not None else {}
        self._mount_lock = threading.Lock()
        self.buffers = buffers
        self.chunk_size = chunk_size
        self.window = window
        self.fs: Optional[Mount] = None
        self._handles: dict[int, object] = {}
        self._hids = itertools.count(1)

    @classmethod
    def connect(cls, ctrl_addr, data_addr, tenant_id: int, secret: bytes, provider: str = "stream",
                container: Optional[str] = "dfs", **kw) -> "InlineClient":
        eng = EngineClient(ctrl_addr, data_addr, tenant_id, secret, provider).connect()
        client = cls(eng, owns_engine=True, **kw)
        if container is not None:
            try:
                client.mount(container)
            except Exception:
                client.shutdown()
                raise
        return client

    # -- contract -----------------------------------------------------------
    def mount(self, container: str = "dfs") -> None:
        with self._mount_lock:
            m = self.mounts.get(container)
            if m is None or m.client is not self.engine or self.engine.closed:
                m = Mount(self.engine, container, self.chunk_size, self.window).mount()
                self.mounts[container] = m
        self.fs = m

    def _fs(self) -> Mount:
        if self.fs is None:
            raise Ros2Error(Status.NOT_FOUND, "not mounted")
        return self.fs

    def _fh(self, handle: int):
        fh = self._handles.get(handle)
        if fh is None:
            raise Ros2Error(Status.BAD_HANDLE, f"handle {handle}")
        return fh

    def open(self, path: str, flags: int = 0, mode: int = 0o644) -> int:
        fh = self._fs().open(path, flags, mode)
        h = next(self._hids)
        self._handles[h] = fh
        return h

    def read(self, handle: int, offset: int, length: int) -> tuple[int, int]:
        fh = self._fh(handle)
        fs = self._fs()
        if self.buffers is None:
            data = fs.read(fh, offset, length)
            return len(data), crc32c(data)
        total, crc = 0, 0
        piece = self.buffers.slab_size
        while total < length:
            want = min(piece, length - total)
            with _Slab(self.buffers) as slab:
                view = memoryview(slab)[:want]
                got = fs.read_into(fh, offset + total, view)
                crc = crc32c_combine(crc, crc32c(view[:got]), got) if total else crc32c(view[:got])
            total += got
            if got < want:
                break
        return total, crc

    def write_pattern(self, handle: int, offset: int, length: int, seed: int) -> tuple[int, int]:
        fh = self._fh(handle)
        fs = self._fs()
        if length == 0:
            return 0, 0
        if self.buffers is None:
            data = pattern_bytes(seed, length)
            n = fs.write(fh, offset, data)
            return n, crc32c(memoryview(data)[:n])
        # pieces are multiples of 4 bytes, so the generator continues seamlessly
        rng = random.Random(seed)
        total, crc = 0, 0
        piece = self.buffers.slab_size
        while total < length:
            want = min(piece, length - total)
            with _Slab(self.buffers):
                data = rng.randbytes(want)
                n = fs.write(fh, offset + total, data)
                c = crc32c(memoryview(data)[:n])
            crc = crc32c_combine(crc, c, n) if total else c
            total += n
            if n < want:
                break
        return total, crc

    def fsync(self, handle: int) -> None:
        self._fs().fsync(self._fh(handle))

    def close(self, handle: int) -> None:
        fh = self._handles.pop(handle, None)
        if fh is None:
            raise Ros2Error(Status.BAD_HANDLE, f"handle {handle}")
        self._fs().close(fh)

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        self._fs().mkdir(path, mode)

    def readdir(self, path: str) -> list[str]:
        return self._fs().readdir(path)

    def unlink(self, path: str) -> None:
        self._fs().unlink(path)

    def stat(self, path: str) -> StatInfo:
        st = self._fs().stat(path)
        return StatInfo(st.kind, st.size, st.mode, st.mtime)

    def run_job(self, job) -> JobSummary:
        from ..bench.workload import percentile, run_job

        res = run_job(self, job)
        s = sorted(res.samples)
        return JobSummary(res.ops, res.bytes, res.seconds, percentile(s, 50), percentile(s, 95),
                          percentile(s, 99), res.error)

    # -- teardown -------------------------------------------------------------
    def release_handles(self) -> None:
        fs = self.fs
        for h in list(self._handles):
            fh = self._handles.pop(h)
            if fs is not None:
                try:
                    fs.close(fh)
                except Ros2Error:
                    pass

    def shutdown(self) -> None:
        self.release_handles()
        if self.owns_engine:
            for m in self.mounts.values():
                if m.client is self.engine and not self.engine.closed:
                    try:
                        m.unmount()
                    except Ros2Error:
                        pass
            self.engine.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


class OffloadClient:
    """Talks to a proxy process; only commands and digests cross the shim."""

    def __init__(self, proxy_addr: tuple[str, int], timeout: float = SHIM_TIMEOUT):
        self.proxy_addr = tuple(proxy_addr)
        self.timeout = timeout
        self.ch: Optional[StreamChannel] = None
        self.commands = 0
        self._ids = itertools.count(1)
        self._pending: dict[int, list] = {}
        self._plock = threading.Lock()
        self._reader: Optional[threading.Thread] = None
        self.dead = False

    def connect(self, timeout: float = 10.0) -> "OffloadClient":
        try:
            sock = socket.create_connection(self.proxy_addr, timeout=timeout)
        except OSError as exc:
            raise Ros2Error(Status.PROXY_UNAVAILABLE, f"{self.proxy_addr}: {exc}") from None
        sock.settimeout(None)
        self.ch = StreamChannel(sock, "shim")
        self._reader = threading.Thread(target=self._read_loop, name="shim-reader", daemon=True)
        self._reader.start()
        return self

    @property
    def shim_bytes(self) -> int:
        """Every byte sent and received on the shim channel, headers included."""
        if self.ch is None:
            return 0
        return self.ch.bytes_sent + self.ch.bytes_received

    def _read_loop(self) -> None:
        ch = self.ch
        try:
            while True:
                ftype, _, payload = ch.recv_frame()
                if ftype not in (FrameType.SHIM_REPLY, FrameType.SHIM_ERROR):
                    continue
                reply = ShimReply.decode(payload)
                with self._plock:
                    slot = self._pending.pop(reply.cmd_id, None)
                if slot is not None:
                    slot[1] = reply
                    slot[0].set()
        except (ChannelClosed, Ros2Error, OSError):
            pass
        finally:
            self.dead = True
            with self._plock:
                slots, self._pending = list(self._pending.values()), {}
            for slot in slots:
                slot[0].set()

    def submit(self, cmd: ShimCommand) -> ShimReply:
        if self.ch is None or self.dead:
            raise Ros2Error(Status.PROXY_UNAVAILABLE, "no connection to the proxy")
        cmd.cmd_id = next(self._ids)
        payload = cmd.encode()
        slot = [threading.Event(), None]
        with self._plock:
            self._pending[cmd.cmd_id] = slot
        try:
            self.ch.send_frame(FrameType.SHIM_CMD, 0, payload)
        except ChannelClosed:
            with self._plock:
                self._pending.pop(cmd.cmd_id, None)
            self.dead = True
            raise Ros2Error(Status.PROXY_UNAVAILABLE, "proxy connection lost") from None
        self.commands += 1
        if not slot[0].wait(self.timeout):
            with self._plock:
                self._pending.pop(cmd.cmd_id, None)
            raise Ros2Error(Status.PROXY_UNAVAILABLE, f"{cmd.op.name} timed out")
        if slot[1] is None:
            raise Ros2Error(Status.PROXY_UNAVAILABLE, "proxy connection lost")
        return slot[1].raise_for_status()

    # -- contract -------------------------------------------------------------
    def mount(self, container: str = "dfs") -> None:
        self.submit(ShimCommand(ShimOp.MOUNT, path=container))

    def open(self, path: str, flags: int = 0, mode: int = 0o644) -> int:
        return self.submit(ShimCommand(ShimOp.OPEN, path=path, flags=flags, mode=mode)).handle

    def read(self, handle: int, offset: int, length: int) -> tuple[int, int]:
        r = self.submit(ShimCommand(ShimOp.READ, handle=handle, offset=offset, length=length))
        return r.nbytes, r.crc

    def write_pattern(self, handle: int, offset: int, length: int, seed: int) -> tuple[int, int]:
        r = self.submit(ShimCommand(ShimOp.WRITE_PATTERN, handle=handle, offset=offset, length=length, seed=seed))
        return r.nbytes, r.crc

    def fsync(self, handle: int) -> None:
        self.submit(ShimCommand(ShimOp.FSYNC, handle=handle))

    def close(self, handle: int) -> None:
        self.submit(ShimCommand(ShimOp.CLOSE, handle=handle))

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        self.submit(ShimCommand(ShimOp.MKDIR, path=path, mode=mode))

    def readdir(self, path: str) -> list[str]:
        names: list[str] = []
        cursor = 0
        while True:
            r = self.submit(ShimCommand(ShimOp.READDIR, path=path, offset=cursor))
            page, more = shim.decode_page(r.body)
            names.extend(page)
            if not more:
                return names
            cursor = r.handle

    def unlink(self, path: str) -> None:
        self.submit(ShimCommand(ShimOp.UNLINK, path=path))

    def stat(self, path: str) -> StatInfo:
        r = self.submit(ShimCommand(ShimOp.STAT, path=path))
        kind, size, mode, mtime = shim.STAT_BODY.unpack(r.body[: shim.STAT_BODY.size])
        return StatInfo(Kind(kind), size, mode, mtime)

    def run_job(self, job) -> JobSummary:
        r = self.submit(ShimCommand(ShimOp.RUNJOB, args=json.dumps(job.to_dict()).encode()))
        return JobSummary.decode(r.body)

    def shutdown(self) -> None:
        if self.ch is not None:
            self.ch.close()
        if self._reader is not None:
            self._reader.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def mode_select(mode: str, *, engine: Optional[dict] = None, proxy_addr=None,
                container: str = "dfs") -> Callable[[], object]:
    """Factory for a mounted file client in ``mode``.

    ``engine`` holds the keyword arguments of :meth:`InlineClient.connect`
    (ctrl_addr, data_addr, tenant_id, secret, provider); offload needs only
    the proxy address.  The factory raises PROXY_UNAVAILABLE when offload
    cannot reach its proxy.
    """
    if mode == "inline":
        if engine is None:
            raise Ros2Error(Status.INVALID_ARGUMENT, "inline mode needs engine connection settings")

        def make_inline():
            return InlineClient.connect(container=container, **engine)

        return make_inline
    if mode == "offload":
        if proxy_addr is None:
            raise Ros2Error(Status.PROXY_UNAVAILABLE, "offload mode needs a proxy address")

        def make_offload():
            c = OffloadClient(proxy_addr).connect()
            try:
                c.mount(container)
            except Exception:
                c.shutdown()
                raise
            return c

        return make_offload
    raise Ros2Error(Status.INVALID_ARGUMENT, f"mode must be one of {MODES}")


def timed(fn, *args) -> tuple[object, int]:
    """(result, elapsed microseconds)."""
    t = time.perf_counter()
    out = fn(*args)
    return out, int((time.perf_counter() - t) * 1e6)

