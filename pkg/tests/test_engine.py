import os
import random
import socket
import time

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import EngineHarness
from ros2store.checksum import crc32c
from ros2store.engine import Engine, EngineClient, EngineConfig
from ros2store.engine import rpc
from ros2store.errors import Ros2Error, Status
from ros2store.transport import Endpoint, Perm
from ros2store.transport.channel import StreamChannel
from ros2store.wire import F_STAGE2, FrameType

KiB, MiB = 1024, 1 << 20
DENIALS = {Status.REMOTE_ACCESS, Status.REVOKED, Status.PERM, Status.UNKNOWN_KEY, Status.EXPIRED,
           Status.OUT_OF_BOUNDS}


def _status(fn, *a, **kw):
    with pytest.raises(Ros2Error) as ei:
        fn(*a, **kw)
    return ei.value.status


def test_ping_echo(harness, provider):
    c = harness.client(provider=provider)
    assert c.ping(b"hello") == b"hello"


def test_bind_failure(harness, tmp_path):
    cfg = EngineConfig(nvme_path=str(tmp_path / "other.img"), listen_ctrl=harness.engine.ctrl_address)
    with pytest.raises(Ros2Error) as ei:
        Engine(cfg, harness.registry).start()
    assert ei.value.status == Status.BIND_FAILURE


def test_auth_failures(harness):
    e = harness.engine
    alice = harness.alice
    bad = EngineClient(e.ctrl_address, e.data_address, alice.tenant_id, b"\x00" * 32)
    assert _status(bad.connect) == Status.AUTH_FAILED
    ghost = EngineClient(e.ctrl_address, e.data_address, 999, alice.secret)
    assert _status(ghost.connect) == Status.UNKNOWN_TENANT


def _hello(addr, tenant_id):
    ch = StreamChannel(socket.create_connection(addr), "control")
    ch.send_frame(FrameType.HELLO, 0, rpc.HELLO.pack(tenant_id) + b"\x06\x00stream")
    _, _, payload = ch.recv_frame()
    status, sid, nonce = rpc.HELLO_ACK.unpack(payload)
    assert status == Status.OK
    return ch, sid, nonce


def test_replayed_handshake_rejected(harness):
    t = harness.alice
    addr = harness.engine.ctrl_address
    ch, sid, nonce = _hello(addr, t.tenant_id)
    mac = rpc.handshake_mac(t.secret, nonce, sid, t.tenant_id)
    ch.send_frame(FrameType.HELLO, F_STAGE2, mac)
    _, _, ack = ch.recv_frame()
    assert rpc.STAGE2_ACK.unpack(ack)[0] == Status.OK
    ch.close()
    # an eavesdropper replays the recorded reply on a new connection
    ch2, _, _ = _hello(addr, t.tenant_id)
    ch2.send_frame(FrameType.HELLO, F_STAGE2, mac)
    try:
        ftype, _, payload = ch2.recv_frame()
        status = rpc.STAGE2_ACK.unpack(payload)[0] if ftype == FrameType.HELLO_ACK else \
            rpc.ERR_HEAD.unpack_from(payload)[1]
    except Ros2Error:
        status = Status.AUTH_FAILED  # closed without a reply
    assert status == Status.AUTH_FAILED
    ch2.close()


def test_rpc_before_auth_refused(harness):
    ch = StreamChannel(socket.create_connection(harness.engine.ctrl_address), "control")
    ch.send_frame(FrameType.RPC_REQ, 0, rpc.REQ_HEAD.pack(rpc.Op.PING, 1))
    try:
        ftype, _, payload = ch.recv_frame()
    except Ros2Error:
        return  # dropped
    assert ftype == FrameType.ERROR
    assert rpc.ERR_HEAD.unpack_from(payload)[1] in (Status.NOT_AUTHED, Status.AUTH_FAILED, Status.MALFORMED)
    ch.close()


def test_unknown_op_unsupported(harness):
    c = harness.client()
    assert _status(c.call, 0xEE) == Status.UNSUPPORTED
    assert c.ping(b"still alive") == b"still alive"


def test_bad_magic_closes_connection(harness):
    c = harness.client()
    c.ctrl.sock.sendall(b"XXXX" + bytes(8))
    deadline = time.monotonic() + 10
    while not c.closed and time.monotonic() < deadline:
        time.sleep(0.01)
    assert c.closed
    assert _status(c.ping, b"x") == Status.NETWORK


class Tap:
    def __init__(self):
        self.events = []

    def __call__(self, ev):
        self.events.append(ev)

    def count(self, plane, ftype, direction=None):
        return sum(1 for e in self.events if e.plane == plane and e.type == ftype
                   and (direction is None or e.direction == direction))


def _tapped(harness, provider):
    tap = Tap()
    c = harness.client(provider=provider, tap=tap)
    return c, tap, c.cont_open("c1")


def test_small_fetch_inline(harness, provider):
    c, tap, cid = _tapped(harness, provider)
    data = os.urandom(4 * KiB)
    c.update(cid, 1, 1, 0, data)
    tap.events.clear()
    buf, info = c.fetch(cid, 1, 1, 0, 4 * KiB)
    assert bytes(buf) == data and info.checksum == crc32c(data)
    one_sided = [e for e in tap.events if e.type in (FrameType.ONESIDED_DATA, FrameType.ONESIDED_READ_REQ)]
    assert one_sided == []


def test_large_fetch_one_write(harness, provider):
    c, tap, cid = _tapped(harness, provider)
    data = os.urandom(MiB)
    c.update(cid, 1, 1, 0, data)
    tap.events.clear()
    buf, info = c.fetch(cid, 1, 1, 0, MiB)
    assert bytes(buf) == data and info.checksum == crc32c(data)
    assert tap.count("data", FrameType.ONESIDED_DATA, "rx") == 1
    assert tap.count("control", FrameType.RPC_RESP, "rx") == 1
    # nothing bulky crossed the control plane
    assert max(e.length for e in tap.events if e.plane == "control") < 4 * KiB


def test_large_update_one_read(harness, provider):
    c, tap, cid = _tapped(harness, provider)
    data = os.urandom(MiB)
    tap.events.clear()
    epoch = c.update(cid, 2, 2, 0, data)
    assert epoch > 0
    assert tap.count("data", FrameType.ONESIDED_READ_REQ, "rx") == 1
    assert max(e.length for e in tap.events if e.plane == "control") < 4 * KiB
    assert bytes(c.fetch(cid, 2, 2, 0, MiB)[0]) == data


def test_threshold_reported(harness):
    assert harness.client().eager_threshold == 16 * KiB


def test_foreign_sink_denied(harness, provider):
    shared = Endpoint(name="shared")
    a_pd, b_pd = shared.alloc_pd(harness.alice.tenant_id), shared.alloc_pd(harness.bob.tenant_id)
    alice = harness.client(harness.alice, provider, endpoint=shared, pd=a_pd)
    cid = alice.cont_open("c")
    alice.update(cid, 1, 1, 0, os.urandom(64 * KiB))
    victim = shared.register_memory(b_pd, 64 * KiB, Perm.REMOTE_WRITE)
    before = bytes(victim.buf)
    buf = bytearray(64 * KiB)
    call = alice.fetch_async(cid, 1, 1, 0, memoryview(buf), sink=(victim.rkey, 0))
    with pytest.raises(Ros2Error) as ei:
        call.result()
    assert ei.value.status in (Status.PERM, Status.REMOTE_ACCESS)  # PD mismatch
    assert bytes(victim.buf) == before


def test_source_deregistered_no_commit(harness):
    c = harness.client()
    cid = c.cont_open("c")
    c.update(cid, 3, 3, 0, b"\x01" * (32 * KiB))
    mr = c.endpoint.register_memory(c.pd, 32 * KiB, Perm.REMOTE_READ)
    mr.view[:] = b"\x02" * (32 * KiB)
    c.endpoint.deregister(mr)
    req = rpc.UpdateReq(cid, 3, 3, 0, 32 * KiB, crc32c(bytes(mr.buf)), rpc.Mode.REMOTE, mr.rkey, 0)
    status = _status(c.call, rpc.Op.OBJ_UPDATE, req.encode_head())
    assert status in DENIALS
    assert bytes(c.fetch(cid, 3, 3, 0, 32 * KiB)[0]) == b"\x01" * (32 * KiB)


def test_wire_corruption_rejected(harness):
    c = harness.client()
    cid = c.cont_open("c")
    data = b"abc" * 1000
    assert _status(c.update, cid, 4, 4, 0, data, crc32c(data) ^ 0x10) == Status.CHECKSUM_MISMATCH


def test_containers_per_tenant(harness):
    a, b = harness.client(harness.alice), harness.client(harness.bob)
    ca, cb = a.cont_open("shared-name"), b.cont_open("shared-name")
    assert ca != cb
    a.update(ca, 1, 1, 0, b"alice")
    assert _status(b.fetch, ca, 1, 1, 0, 5) in (Status.UNKNOWN_CONTAINER, Status.PERM)


def test_capability_via_engine(harness):
    c = harness.client()
    tok, window = c.cap_issue(0, 4096, Perm.REMOTE_READ, ttl=10)
    assert tok.end == 4096 and window >= 4096
    c.cap_revoke(tok.token_id)
    assert _status(c.cap_revoke, tok.token_id) == Status.UNKNOWN_TOKEN


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(1, 200 * KiB), st.integers(0, 1 << 20), st.integers(0, 2**32))
def test_end_to_end_integrity(harness, n, off, seed):
    c = harness.clients[0] if harness.clients else harness.client()
    cid = c.cont_open("e2e")
    data = random.Random(seed).randbytes(n)
    c.update(cid, 7, seed, off, data)
    buf, info = c.fetch(cid, 7, seed, off, n)
    assert bytes(buf) == data and info.checksum == crc32c(data)


def test_restart_keeps_objects(tmp_path):
    h = EngineHarness(tmp_path)
    c = h.client()
    cid = c.cont_open("durable")
    blobs = {i: os.urandom(random.Random(i).choice([100, 4096, 70000])) for i in range(10)}
    for i, d in blobs.items():
        c.update(cid, 9, i, 0, d)
    h.close()
    cfg = EngineConfig(nvme_path=str(tmp_path / "pool.img"))
    e = Engine(cfg, h.registry).start()
    try:
        c2 = EngineClient(e.ctrl_address, e.data_address, h.alice.tenant_id, h.alice.secret).connect()
        assert c2.cont_open("durable", create=False) == cid
        for i, d in blobs.items():
            assert bytes(c2.fetch(cid, 9, i, 0, len(d))[0]) == d
        c2.close()
    finally:
        e.stop()


def test_pipelined_requests_answer_once(harness):
    c = harness.client()
    cid = c.cont_open("p")
    calls = [c.update_async(cid, 1, i, 0, bytes([i]) * 100) for i in range(64)]
    epochs = [x.result() for x in calls]
    assert len(set(epochs)) == 64
