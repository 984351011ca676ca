"""The proxy process: the whole file client stack behind a shim listener.

The proxy owns one authenticated engine session (opened lazily, and again
after it drops) and a bounded staging buffer pool.  Hosts connect over the
shim channel; each connection gets its own handle table, while mounts are
shared so every host sees one coherent view of a container.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from ..dfs import Mount
from ..dfs.layout import DEFAULT_CHUNK
from ..engine.client import EngineClient
from ..engine.config import parse_addr, parse_size
from ..errors import Ros2Error, Status
from ..tenancy import load_tenants
from ..transport import PROVIDERS
from ..transport.channel import ChannelClosed, StreamChannel
from ..wire import FrameType
from . import shim
from .clients import BufferPool, InlineClient
from .shim import ShimCommand, ShimOp, ShimReply

log = logging.getLogger(__name__)

DEFAULT_WORKERS = 4
DEFAULT_BUFFER_POOL = 64 << 20


@dataclass
class ProxyConfig:
    engine_ctrl: tuple[str, int]
    engine_data: tuple[str, int]
    tenant_id: int
    secret: bytes
    provider: str = "stream"
    listen: tuple[str, int] = ("127.0.0.1", 0)
    workers: int = DEFAULT_WORKERS
    buffer_pool_bytes: int = DEFAULT_BUFFER_POOL
    chunk_size: int = DEFAULT_CHUNK
    window: int = 8
    extra: dict[str, str] = field(default_factory=dict)

    def validate(self) -> "ProxyConfig":
        if self.provider not in PROVIDERS:
            raise Ros2Error(Status.CONFIG, f"unknown provider {self.provider!r}")
        if self.workers < 1 or self.buffer_pool_bytes < 4096 * self.workers:
            raise Ros2Error(Status.CONFIG, "workers must be >= 1 and the buffer pool >= 4 KiB per worker")
        return self


def load_proxy_config(path: str) -> ProxyConfig:
    """Read a ``key = value`` proxy config.

    Keys: engine_ctrl, engine_data, provider, listen, workers,
    buffer_pool_bytes, chunk_size, window, and the tenant identity as either
    ``tenant_id`` + ``secret`` (hex) or ``tenants`` (file) + ``tenant``
    (name or id).
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise Ros2Error(Status.CONFIG, f"{path}: {exc}") from None
    kv: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise Ros2Error(Status.CONFIG, f"{path}:{lineno}: expected key = value")
        kv[key.strip()] = value.strip()
    base = os.path.dirname(os.path.abspath(path))
    try:
        if "tenants" in kv:
            tpath = kv.pop("tenants")
            reg = load_tenants(tpath if os.path.isabs(tpath) else os.path.join(base, tpath))
            who = kv.pop("tenant", "")
            tenant = next((t for t in reg if t.name == who or str(t.tenant_id) == who), None)
            if tenant is None:
                raise Ros2Error(Status.CONFIG, f"tenant {who!r} not in {tpath}")
            tenant_id, secret = tenant.tenant_id, tenant.secret
        else:
            tenant_id, secret = int(kv.pop("tenant_id")), bytes.fromhex(kv.pop("secret"))
        cfg = ProxyConfig(
            engine_ctrl=parse_addr(kv.pop("engine_ctrl")),
            engine_data=parse_addr(kv.pop("engine_data")),
            tenant_id=tenant_id,
            secret=secret,
            provider=kv.pop("provider", "stream"),
            listen=parse_addr(kv.pop("listen", "127.0.0.1:0")),
            workers=int(kv.pop("workers", DEFAULT_WORKERS)),
            buffer_pool_bytes=parse_size(kv.pop("buffer_pool_bytes", str(DEFAULT_BUFFER_POOL))),
            chunk_size=parse_size(kv.pop("chunk_size", str(DEFAULT_CHUNK))),
            window=int(kv.pop("window", "8")),
            extra=kv,
        )
    except KeyError as exc:
        raise Ros2Error(Status.CONFIG, f"{path}: missing key {exc}") from None
    except ValueError as exc:
        raise Ros2Error(Status.CONFIG, f"{path}: {exc}") from None
    return cfg.validate()


class ProxyServer:
    def __init__(self, config: ProxyConfig):
        self.config = config.validate()
        self.buffers = BufferPool(config.buffer_pool_bytes, config.workers)
        self.mounts: dict[str, Mount] = {}
        self.engine: Optional[EngineClient] = None
        self._engine_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(config.workers, thread_name_prefix="proxy-worker")
        self._listener: Optional[socket.socket] = None
        self._conns: set[StreamChannel] = set()
        self._stopped = threading.Event()
        self.address: Optional[tuple[str, int]] = None
        self.commands = 0
        self.shim_bytes = 0

    # -- lifecycle ------------------------------------------------------------
    def start(self) -> "ProxyServer":
        try:
            self._listener = socket.create_server(self.config.listen, backlog=64)
        except OSError as exc:
            raise Ros2Error(Status.BIND_FAILURE, f"{self.config.listen}: {exc}") from None
        self.address = self._listener.getsockname()[:2]
        threading.Thread(target=self._accept_loop, name="proxy-accept", daemon=True).start()
        log.info("proxy listening on %s:%d (%d workers, %d MiB buffers)", *self.address,
                 self.config.workers, self.buffers.capacity >> 20)
        return self

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._listener.close()
        for ch in list(self._conns):
            ch.close()
        self._pool.shutdown(wait=True)
        with self._engine_lock:
            if self.engine is not None:
                for m in self.mounts.values():
                    if m.client is self.engine and not self.engine.closed:
                        try:
                            m.unmount()
                        except Ros2Error:
                            pass
                self.engine.close()

    def wait(self) -> None:
        self._stopped.wait()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _engine(self) -> EngineClient:
        with self._engine_lock:
            if self.engine is None or self.engine.closed:
                c = self.config
                self.engine = EngineClient(c.engine_ctrl, c.engine_data, c.tenant_id, c.secret,
                                           c.provider).connect()
                self.mounts.clear()
            return self.engine

    # -- connections ----------------------------------------------------------
    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(sock,), name="proxy-conn", daemon=True).start()

    def _serve(self, sock: socket.socket) -> None:
        ch = StreamChannel(sock, "shim")
        self._conns.add(ch)
        session = _ShimSession(self)
        try:
            while True:
                ftype, _, payload = ch.recv_frame()
                if ftype != FrameType.SHIM_CMD:
                    ch.send_frame(FrameType.SHIM_ERROR, 0,
                                  ShimReply(0, Status.UNSUPPORTED, body=b"expected SHIM_CMD").encode())
                    continue
                try:
                    cmd = ShimCommand.decode(payload)
                except Ros2Error as exc:
                    ch.send_frame(FrameType.SHIM_ERROR, 0, ShimReply(0, exc.status, body=str(exc).encode()).encode())
                    continue
                self.commands += 1
                self._pool.submit(self._execute, ch, session, cmd)
        except (ChannelClosed, Ros2Error, OSError):
            pass
        except RuntimeError:
            pass  # executor shut down
        finally:
            self._conns.discard(ch)
            self.shim_bytes += ch.bytes_sent + ch.bytes_received
            ch.close()
            session.release()

    def _execute(self, ch: StreamChannel, session: "_ShimSession", cmd: ShimCommand) -> None:
        t = time.perf_counter()
        try:
            reply = session.handle(cmd)
        except Ros2Error as exc:
            reply = ShimReply(cmd.cmd_id, exc.status, body=exc.message.encode("utf-8", "replace"))
        except Exception as exc:  # noqa: BLE001 - a bug must not kill the worker
            log.exception("shim %s failed", cmd.op.name)
            reply = ShimReply(cmd.cmd_id, Status.IO, body=repr(exc).encode())
        reply.latency_us = int((time.perf_counter() - t) * 1e6)
        try:
            ch.send_frame(FrameType.SHIM_REPLY, 0, reply.encode())
        except ChannelClosed:
            pass


class _ShimSession:
    """Per-connection state: the file client and its handle table."""

    def __init__(self, server: ProxyServer):
        self.server = server
        self.client: Optional[InlineClient] = None

    def _client(self, need_mount: bool = True) -> InlineClient:
        if self.client is None or self.client.engine.closed:
            if need_mount:
                raise Ros2Error(Status.NOT_FOUND, "not mounted")
        return self.client

    def handle(self, cmd: ShimCommand) -> ShimReply:
        op = cmd.op
        rid = cmd.cmd_id
        if op is ShimOp.MOUNT:
            try:
                engine = self.server._engine()
            except Ros2Error as exc:
                if exc.status in (Status.ENGINE_UNREACHABLE, Status.NETWORK):
                    raise Ros2Error(Status.ENGINE_UNREACHABLE, exc.message) from None
                raise
            s = self.server
            if self.client is None or self.client.engine is not engine:
                self.client = InlineClient(engine, mounts=s.mounts, buffers=s.buffers,
                                           chunk_size=s.config.chunk_size, window=s.config.window)
            self.client.mount(cmd.path or "dfs")
            return ShimReply(rid)
        c = self._client()
        if op is ShimOp.OPEN:
            return ShimReply(rid, handle=c.open(cmd.path, cmd.flags, cmd.mode or 0o644))
        if op is ShimOp.READ:
            n, crc = c.read(cmd.handle, cmd.offset, cmd.length)
            return ShimReply(rid, nbytes=n, crc=crc)
        if op is ShimOp.WRITE_PATTERN:
            n, crc = c.write_pattern(cmd.handle, cmd.offset, cmd.length, cmd.seed)
            return ShimReply(rid, nbytes=n, crc=crc)
        if op is ShimOp.FSYNC:
            c.fsync(cmd.handle)
            return ShimReply(rid)
        if op is ShimOp.CLOSE:
            c.close(cmd.handle)
            return ShimReply(rid)
        if op is ShimOp.MKDIR:
            c.mkdir(cmd.path, cmd.mode or 0o755)
            return ShimReply(rid)
        if op is ShimOp.READDIR:
            body, nxt = shim.encode_page(c.readdir(cmd.path), cmd.offset)
            return ShimReply(rid, handle=nxt, body=body)
        if op is ShimOp.UNLINK:
            c.unlink(cmd.path)
            return ShimReply(rid)
        if op is ShimOp.STAT:
            st = c.stat(cmd.path)
            return ShimReply(rid, nbytes=st.size, body=shim.STAT_BODY.pack(st.kind, st.size, st.mode, st.mtime))
        if op is ShimOp.RUNJOB:
            from ..bench.workload import JobSpec

            try:
                job = JobSpec(**json.loads(cmd.args))
            except (TypeError, ValueError) as exc:
                raise Ros2Error(Status.INVALID_ARGUMENT, f"job spec: {exc}") from None
            summary = c.run_job(job)
            return ShimReply(rid, nbytes=summary.bytes, body=summary.encode())
        raise Ros2Error(Status.UNSUPPORTED, op.name)

    def release(self) -> None:
        if self.client is not None:
            self.client.release_handles()


def serve(config: ProxyConfig) -> ProxyServer:
    return ProxyServer(config).start()
