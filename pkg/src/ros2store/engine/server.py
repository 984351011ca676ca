"""The storage engine daemon.

Two listeners: the control listener carries session setup and RPCs, the
data listener carries each session's queue pair.  Per session, small
requests are handled in the control reader thread in arrival order;
requests that move bulk data through the queue pair go to a worker pool so
a slow transfer does not stall the session's metadata traffic.
"""

from __future__ import annotations

import hmac
import logging
import os
import secrets
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from ..clock import SYSTEM_CLOCK
from ..errors import Ros2Error, Status
from ..store import ObjectID, Pool
from ..store.pool import manifest_path
from ..tenancy import CapabilityAuthority, QosTable, Tenant, TenantRegistry, load_tenants
from ..transport import Channel, ChannelClosed, Endpoint, MemoryRegion, Perm, QueuePair, make_channel
from ..transport.channel import StreamChannel, Tap
from ..wire import F_DATA_ATTACH, F_RESPONSE, F_STAGE2, FrameType, MalformedFrame, Reader, Writer
from . import rpc
from .config import EngineConfig
from .rpc import LATEST, Mode, Op

log = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 10.0
QP_ATTACH_TIMEOUT = 10.0


class SessionState(Enum):
    HANDSHAKE = "handshake"
    AUTHED = "authed"
    CLOSED = "closed"


@dataclass(eq=False)
class Session:
    session_id: int
    tenant: Tenant
    provider: str
    ctrl: Channel
    state: SessionState = SessionState.HANDSHAKE
    data_token: bytes = b""
    qp: Optional[QueuePair] = None
    qp_ready: threading.Event = field(default_factory=threading.Event)
    window: Optional[MemoryRegion] = None
    tokens: set[int] = field(default_factory=set)
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def tenant_id(self) -> int:
        return self.tenant.tenant_id

    def wait_qp(self) -> QueuePair:
        if not self.qp_ready.wait(QP_ATTACH_TIMEOUT) or self.qp is None:
            raise Ros2Error(Status.NETWORK, "session has no data connection")
        return self.qp


class Engine:
    def __init__(self, config: EngineConfig, tenants: Optional[TenantRegistry] = None,
                 clock=SYSTEM_CLOCK, tap: Optional[Tap] = None):
        self.config = config
        self.clock = clock
        self.tap = tap
        if tenants is None:
            tenants = load_tenants(config.tenants_path) if config.tenants_path else TenantRegistry()
        self.tenants = tenants
        self.qos = QosTable(clock, tenants.qos_limits)
        self.endpoint = Endpoint(clock, name="engine")
        self.authority = CapabilityAuthority(self.endpoint)
        self.pool: Optional[Pool] = None
        self.sessions: dict[int, Session] = {}
        self._pds: dict[int, object] = {}
        self._lock = threading.Lock()
        self._cont_lock = threading.Lock()
        self._listeners: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._workers: Optional[ThreadPoolExecutor] = None
        self._stopped = threading.Event()
        self.ctrl_address: Optional[tuple[str, int]] = None
        self.data_address: Optional[tuple[str, int]] = None
        self._handlers: dict[int, Callable] = {
            Op.CONNECT: self._op_connect,
            Op.POOL_CONNECT: self._op_pool_connect,
            Op.CONT_OPEN: self._op_cont_open,
            Op.OBJ_UPDATE: self._op_update,
            Op.OBJ_FETCH: self._op_fetch,
            Op.OBJ_PUNCH: self._op_punch,
            Op.CAP_ISSUE: self._op_cap_issue,
            Op.CAP_REVOKE: self._op_cap_revoke,
            Op.PING: self._op_ping,
            Op.CLOSE: self._op_close,
            Op.OBJ_FLUSH: self._op_flush,
            Op.CONT_SNAPSHOT: self._op_snapshot,
        }

    # -- lifecycle ----------------------------------------------------------
    def start(self) -> "Engine":
        cfg = self.config
        if os.path.exists(cfg.nvme_path) or os.path.exists(manifest_path(cfg.nvme_path)):
            self.pool = Pool.open(cfg.nvme_path)
        else:
            self.pool = Pool.create(cfg.scm_bytes, cfg.nvme_path, cfg.nvme_bytes)
        try:
            ctrl = self._bind(cfg.listen_ctrl)
            try:
                data = self._bind(cfg.listen_data)
            except Ros2Error:
                ctrl.close()
                raise
        except Ros2Error:
            self.pool.close()
            raise
        self.ctrl_address = ctrl.getsockname()[:2]
        self.data_address = data.getsockname()[:2]
        self._listeners = [ctrl, data]
        self._workers = ThreadPoolExecutor(cfg.workers, thread_name_prefix="engine-bulk")
        for sock, fn, name in ((ctrl, self._serve_control, "ctrl"), (data, self._serve_data, "data")):
            t = threading.Thread(target=self._accept_loop, args=(sock, fn), name=f"accept-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("engine up: control %s:%d data %s:%d", *self.ctrl_address, *self.data_address)
        return self

    @staticmethod
    def _bind(addr: tuple[str, int]) -> socket.socket:
        try:
            return socket.create_server(addr, reuse_port=False, backlog=128)
        except OSError as exc:
            raise Ros2Error(Status.BIND_FAILURE, f"{addr[0]}:{addr[1]}: {exc}") from None

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        for s in self._listeners:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        for sess in list(self.sessions.values()):
            self._end_session(sess)
        for t in self._threads:
            t.join(timeout=5)
        if self._workers is not None:
            self._workers.shutdown(wait=True)
        if self.pool is not None:
            self.pool.close()
        log.info("engine stopped")

    def wait(self) -> None:
        self._stopped.wait()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self, listener: socket.socket, handler) -> None:
        while not self._stopped.is_set():
            try:
                sock, _ = listener.accept()
            except OSError:
                return
            threading.Thread(target=handler, args=(sock,), daemon=True).start()

    def _pd(self, tenant_id: int):
        with self._lock:
            pd = self._pds.get(tenant_id)
            if pd is None:
                pd = self._pds[tenant_id] = self.endpoint.alloc_pd(tenant_id)
            return pd

    # -- control connections ----------------------------------------------
    def _serve_control(self, sock: socket.socket) -> None:
        ch: Channel = StreamChannel(sock, "control", self.tap)
        session = None
        try:
            sock.settimeout(HANDSHAKE_TIMEOUT)
            session = self._handshake(ch)
            if session is None:
                return
            sock.settimeout(None)
            if session.provider != "stream":
                ch = session.ctrl = make_channel(session.provider, sock, "control", self.tap)
            self._rpc_loop(session)
        except (ChannelClosed, OSError):
            pass
        except MalformedFrame as exc:
            log.info("closing control connection: %s", exc)
        finally:
            if session is not None:
                self._end_session(session)
            else:
                ch.close()

    def _handshake(self, ch: Channel) -> Optional[Session]:
        ftype, flags, payload = ch.recv_frame()
        if ftype != FrameType.HELLO or flags & (F_STAGE2 | F_DATA_ATTACH) or len(payload) < rpc.HELLO.size:
            self._reject(ch, Status.NOT_AUTHED, "expected HELLO")
            return None
        (tenant_id,) = rpc.HELLO.unpack_from(payload)
        provider = Reader(payload[rpc.HELLO.size :]).text()
        try:
            tenant = self.tenants.get(tenant_id)
        except Ros2Error:
            ch.send_frame(FrameType.HELLO_ACK, F_RESPONSE, rpc.HELLO_ACK.pack(Status.UNKNOWN_TENANT, 0, bytes(16)))
            return None
        if provider not in self.config.providers:
            ch.send_frame(FrameType.HELLO_ACK, F_RESPONSE, rpc.HELLO_ACK.pack(Status.UNSUPPORTED, 0, bytes(16)))
            return None
        session_id = secrets.randbits(63) | 1
        nonce = secrets.token_bytes(rpc.NONCE_BYTES)
        ch.send_frame(FrameType.HELLO_ACK, F_RESPONSE, rpc.HELLO_ACK.pack(Status.OK, session_id, nonce))
        ftype, flags, payload = ch.recv_frame()
        if ftype != FrameType.HELLO or not flags & F_STAGE2:
            self._reject(ch, Status.NOT_AUTHED, "expected challenge response")
            return None
        want = rpc.handshake_mac(tenant.secret, nonce, session_id, tenant_id)
        nonce = None  # single use
        if not hmac.compare_digest(bytes(payload), want):
            ch.send_frame(FrameType.HELLO_ACK, F_RESPONSE | F_STAGE2,
                          rpc.STAGE2_ACK.pack(Status.AUTH_FAILED, bytes(16), 0))
            log.info("tenant %d failed authentication", tenant_id)
            return None
        session = Session(session_id, tenant, provider, ch, SessionState.AUTHED,
                          secrets.token_bytes(rpc.TOKEN_BYTES))
        with self._lock:
            self.sessions[session_id] = session
        ch.send_frame(FrameType.HELLO_ACK, F_RESPONSE | F_STAGE2,
                      rpc.STAGE2_ACK.pack(Status.OK, session.data_token, self.config.eager_threshold))
        log.debug("session %x: tenant %d over %s", session_id, tenant_id, provider)
        return session

    @staticmethod
    def _reject(ch: Channel, status: Status, msg: str) -> None:
        try:
            ch.send_frame(FrameType.ERROR, 0, rpc.encode_error(0, status, msg))
        except ChannelClosed:
            pass

    def _rpc_loop(self, session: Session) -> None:
        ch = session.ctrl
        thr = self.config.eager_threshold
        while session.state is SessionState.AUTHED:
            ftype, flags, payload = ch.recv_frame()
            if ftype != FrameType.RPC_REQ or len(payload) < rpc.REQ_HEAD.size:
                ch.send_frame(FrameType.ERROR, 0,
                              rpc.encode_error(0, Status.UNSUPPORTED, f"unexpected frame type {ftype:#x}"))
                continue
            op, rid = rpc.REQ_HEAD.unpack_from(payload)
            body = memoryview(payload)[rpc.REQ_HEAD.size :]
            handler = self._handlers.get(op)
            if handler is None:
                ch.send_frame(FrameType.ERROR, 0, rpc.encode_error(rid, Status.UNSUPPORTED, f"op {op:#x}"))
                continue
            if op in (Op.OBJ_UPDATE, Op.OBJ_FETCH) and _bulk(op, body, thr):
                self._workers.submit(self._run, session, op, rid, handler, bytes(body))
            else:
                self._run(session, op, rid, handler, body)

    def _run(self, session: Session, op: int, rid: int, handler, body) -> None:
        try:
            parts = handler(session, body)
            status = Status.OK
        except Ros2Error as exc:
            status, parts = exc.status, (exc.message.encode("utf-8", "replace")[:1024],)
        except Exception as exc:  # keep the session alive; report and move on
            log.exception("op %s failed", op)
            status, parts = Status.IO, (str(exc).encode()[:1024],)
        try:
            session.ctrl.send_frame(FrameType.RPC_RESP, F_RESPONSE,
                                    rpc.RESP_HEAD.pack(op, rid, status), *parts)
        except ChannelClosed:
            pass
        if op == Op.CLOSE and status == Status.OK:
            self._end_session(session)

    def _end_session(self, session: Session) -> None:
        with session.lock:
            if session.state is SessionState.CLOSED:
                return
            session.state = SessionState.CLOSED
        with self._lock:
            self.sessions.pop(session.session_id, None)
        for tok in list(session.tokens):
            try:
                self.authority.revoke_capability(tok)
            except Ros2Error:
                pass
        if session.window is not None:
            self.endpoint.deregister(session.window)
        if session.qp is not None:
            session.qp.close()
        session.qp_ready.set()
        session.ctrl.close()

    # -- data connections -------------------------------------------------
    def _serve_data(self, sock: socket.socket) -> None:
        ch = StreamChannel(sock, "data", self.tap)
        try:
            sock.settimeout(HANDSHAKE_TIMEOUT)
            ftype, flags, payload = ch.recv_frame()
            if ftype != FrameType.HELLO or not flags & F_DATA_ATTACH or len(payload) != rpc.ATTACH.size:
                raise MalformedFrame("expected data attach")
            sid, token = rpc.ATTACH.unpack(payload)
            session = self.sessions.get(sid)
            if session is None or session.qp is not None or not hmac.compare_digest(token, session.data_token):
                ch.send_frame(FrameType.HELLO_ACK, F_RESPONSE | F_DATA_ATTACH, rpc.ATTACH_ACK.pack(Status.AUTH_FAILED))
                ch.close()
                return
            ch.send_frame(FrameType.HELLO_ACK, F_RESPONSE | F_DATA_ATTACH, rpc.ATTACH_ACK.pack(Status.OK))
            sock.settimeout(None)
            qch = make_channel(session.provider, sock, "data", self.tap)
            session.qp = self.endpoint.attach(qch, self._pd(session.tenant_id))
            session.qp_ready.set()
            if session.state is SessionState.CLOSED:
                session.qp.close()
        except (ChannelClosed, MalformedFrame, OSError) as exc:
            log.debug("data attach failed: %s", exc)
            ch.close()

    # -- op handlers ------------------------------------------------------
    def _container(self, session: Session, cid: int):
        cont = self.pool.container(cid)
        if not cont.label.startswith(f"{session.tenant_id}:"):
            raise Ros2Error(Status.PERM, f"container {cid} belongs to another tenant")
        return cont

    def _admit(self, session: Session, nbytes: int) -> None:
        self.qos.wait_admit(session.tenant_id, nbytes)

    def _op_connect(self, session: Session, body):
        w = Writer().u64(session.session_id).u32(self.config.eager_threshold).text(session.provider)
        return (w.u64(self.pool.pool_id).getvalue(),)

    def _op_pool_connect(self, session: Session, body):
        p = self.pool
        return (Writer().u64(p.pool_id).u64(p.scm_capacity).u64(p.nvme_capacity).getvalue(),)

    def _op_cont_open(self, session: Session, body):
        r = Reader(body)
        name, create = r.text(), r.u8()
        label = f"{session.tenant_id}:{name}"
        created = 0
        with self._cont_lock:
            cont = self.pool.container_by_label(label)
            if cont is None:
                if not create:
                    raise Ros2Error(Status.UNKNOWN_CONTAINER, name)
                cont = self.pool.create_container(label)
                created = 1
        return (Writer().u64(cont.container_id).u64(cont.epoch).u8(created).getvalue(),)

    def _op_update(self, session: Session, body):
        req = rpc.UpdateReq.decode(body)
        self._container(session, req.container_id)
        thr = self.config.eager_threshold
        oid = ObjectID(req.container_id, req.hi, req.lo)
        if req.mode is Mode.INLINE:
            if len(req.payload) != req.length:
                raise MalformedFrame("inline payload length disagrees with request")
            if req.length >= thr:
                raise Ros2Error(Status.INVALID_ARGUMENT, "payloads at or above the eager threshold must use rendezvous")
            self._admit(session, req.length)
            payload = req.payload
        else:
            if req.length == 0:
                raise Ros2Error(Status.INVALID_ARGUMENT, "empty update")
            self._admit(session, req.length)
            qp = session.wait_qp()
            buf = bytearray(req.length)
            mr = self.endpoint.register_memory(qp.pd, req.length, Perm.NONE, buffer=buf)
            try:
                c = qp.one_sided_read(mr, 0, req.rkey, req.remote_offset, req.length)
            finally:
                self.endpoint.deregister(mr)
            if not c.ok:
                raise Ros2Error(c.reason or c.status, f"source read failed ({c.status.name})")
            payload = buf
        epoch = self.pool.update(oid, req.offset, payload, req.checksum)
        return (Writer().u64(epoch).getvalue(),)

    def _op_fetch(self, session: Session, body):
        req = rpc.FetchReq.decode(body)
        self._container(session, req.container_id)
        self._admit(session, req.length)
        at = None if req.at_epoch == LATEST else req.at_epoch
        res = self.pool.fetch(ObjectID(req.container_id, req.hi, req.lo), req.offset, req.length, at)
        if req.length < self.config.eager_threshold:
            resp = rpc.FetchResp(res.epoch, res.checksum, Mode.INLINE, res.extents)
            return (resp.encode_head(), res.data)
        if req.mode is not Mode.REMOTE:
            raise Ros2Error(Status.INVALID_ARGUMENT, "fetches at or above the eager threshold need a sink")
        qp = session.wait_qp()
        mr = self.endpoint.register_memory(qp.pd, req.length, Perm.NONE, buffer=res.data)
        try:
            c = qp.one_sided_write(mr, 0, req.rkey, req.remote_offset, req.length)
        finally:
            self.endpoint.deregister(mr)
        if not c.ok:
            raise Ros2Error(c.reason or c.status, f"sink write failed ({c.status.name})")
        return (rpc.FetchResp(res.epoch, res.checksum, Mode.REMOTE, res.extents).encode_head(),)

    def _op_punch(self, session: Session, body):
        req = rpc.PunchReq.decode(body)
        self._container(session, req.container_id)
        epoch = self.pool.punch(ObjectID(req.container_id, req.hi, req.lo), req.offset, req.length)
        return (Writer().u64(epoch).getvalue(),)

    def _op_flush(self, session: Session, body):
        self.pool.flush()
        return ()

    def _op_snapshot(self, session: Session, body):
        cid = Reader(body).u64()
        self._container(session, cid)
        return (Writer().u64(self.pool.snapshot(cid)).getvalue(),)

    def _op_cap_issue(self, session: Session, body):
        req = rpc.CapIssueReq.decode(body)
        with session.lock:
            if session.window is None:
                session.window = self.endpoint.register_memory(
                    self._pd(session.tenant_id), self.config.window_bytes, Perm.ALL)
        tok = self.authority.issue_capability(session.tenant, session.window, req.offset,
                                              req.offset + req.length, Perm(req.perms), req.ttl)
        session.tokens.add(tok.token_id)
        return (tok.encode(), Writer().u64(session.window.length).getvalue())

    def _op_cap_revoke(self, session: Session, body):
        token_id = Reader(body).u64()
        if token_id not in session.tokens:
            raise Ros2Error(Status.UNKNOWN_TOKEN, f"{token_id:#x}")
        session.tokens.discard(token_id)
        self.authority.revoke_capability(token_id)
        return ()

    def _op_ping(self, session: Session, body):
        return (bytes(body),)

    def _op_close(self, session: Session, body):
        return ()


def _bulk(op: int, body, threshold: int) -> bool:
    """Requests whose data moves through the queue pair."""
    if len(body) < 41:
        return False
    length = int.from_bytes(body[32:40], "little")
    return length >= threshold
