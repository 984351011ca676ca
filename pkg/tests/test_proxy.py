import random
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import PROVIDERS
from ros2store.checksum import crc32c
from ros2store.errors import Ros2Error, Status
from ros2store.procs import spawn_proxy
from ros2store.proxy import (BufferPool, OffloadClient, ProxyConfig, ProxyServer, ShimCommand, ShimOp, ShimReply,
                             mode_select, pattern_bytes)
from ros2store.proxy.shim import MAX_SHIM_FRAME, decode_page, encode_page
from ros2store.wire import HEADER_SIZE

KiB, MiB = 1024, 1 << 20
RDWR, CREATE, TRUNC = 0x2, 0x40, 0x200


def _status(fn, *a, **kw):
    with pytest.raises(Ros2Error) as ei:
        fn(*a, **kw)
    return ei.value.status


# -- codec -------------------------------------------------------------------

@given(st.sampled_from(list(ShimOp)), st.integers(0, 2**64 - 1), st.text(max_size=200),
       st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1))
def test_command_roundtrip(op, seed, path, offset, flags):
    cmd = ShimCommand(op, cmd_id=5, path=path, offset=offset, length=9, flags=flags, seed=seed)
    assert ShimCommand.decode(cmd.encode()) == cmd


def test_reply_roundtrip_and_cap():
    r = ShimReply(3, Status.OK, nbytes=MiB, crc=0xDEADBEEF, latency_us=12, handle=4, body=b"xy")
    assert ShimReply.decode(r.encode()) == r
    assert _status(ShimCommand(ShimOp.MKDIR, path="x" * 5000).encode) == Status.OVERSIZED
    assert _status(ShimReply(1, body=b"z" * MAX_SHIM_FRAME).encode) == Status.OVERSIZED


def test_pages_fit_a_frame():
    names = [f"entry-{i:05d}-" + "n" * 40 for i in range(500)]
    got, cursor, pages = [], 0, 0
    while True:
        body, nxt = encode_page(names, cursor)
        assert HEADER_SIZE + 34 + len(body) <= MAX_SHIM_FRAME
        page, more = decode_page(body)
        got += page
        pages += 1
        if not more:
            break
        cursor = nxt
    assert got == names and pages > 1


def test_pattern_concatenates():
    # pieces a multiple of 4 bytes long extend one another seamlessly
    assert pattern_bytes(7, 4096) == pattern_bytes(7, 8192)[:4096]
    assert pattern_bytes(7, 10) != pattern_bytes(8, 10)


def test_buffer_pool_slabs():
    pool = BufferPool(64 * MiB, 4)
    assert pool.slab_size == 16 * MiB
    slabs = [pool.acquire() for _ in range(4)]
    took = []
    t = threading.Thread(target=lambda: took.append(pool.acquire()))
    t.start()
    t.join(0.2)
    assert t.is_alive()  # budget exhausted, caller waits
    pool.release(slabs[0])
    t.join(5)
    assert took and took[0] is slabs[0]


# -- contract ------------------------------------------------------------------

def test_roundtrip_digest(file_clients, provider):
    c = file_clients(provider, "offload")
    h = c.open("/p", RDWR | CREATE)
    n, wcrc = c.write_pattern(h, 0, MiB, 7)
    assert n == MiB and wcrc == crc32c(pattern_bytes(7, MiB))
    before, cmds = c.shim_bytes, c.commands
    assert c.read(h, 0, MiB) == (MiB, wcrc)
    assert c.shim_bytes - before < 4 * KiB and c.commands - cmds == 1
    c.close(h)


def test_unmounted_read_not_found(harness, file_clients):
    proxy = file_clients.proxy("stream")
    c = OffloadClient(proxy.address).connect()
    try:
        assert _status(c.read, 1, 0, 10) == Status.NOT_FOUND
        assert _status(c.stat, "/") == Status.NOT_FOUND
    finally:
        c.shutdown()


def test_bad_handle(file_clients):
    c = file_clients("stream", "offload")
    assert _status(c.read, 999, 0, 1) == Status.BAD_HANDLE


def test_no_proxy_unavailable():
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        dead = s.getsockname()
    assert _status(mode_select("offload", proxy_addr=dead)) == Status.PROXY_UNAVAILABLE
    assert _status(mode_select, "offload") == Status.PROXY_UNAVAILABLE


def test_engine_down_unreachable(harness):
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        dead = s.getsockname()
    t = harness.alice
    with ProxyServer(ProxyConfig(dead, dead, t.tenant_id, t.secret)) as proxy:
        c = OffloadClient(proxy.address).connect()
        try:
            assert _status(c.mount, "dfs") == Status.ENGINE_UNREACHABLE
        finally:
            c.shutdown()


def _script(c, seed):
    """A fixed op script; returns every observable outcome."""
    rng = random.Random(seed)
    out = []

    def do(fn, *a):
        try:
            out.append(("OK", fn(*a)))
        except Ros2Error as exc:
            out.append((exc.status.name, None))

    do(c.mkdir, "/s")
    do(c.mkdir, "/s")
    handles = []
    for i in range(4):
        h = c.open(f"/s/f{i}", RDWR | CREATE | TRUNC)
        handles.append(h)
        for _ in range(5):
            do(c.write_pattern, h, rng.randrange(4 * MiB), rng.choice([1, 100, 4096, 70000, MiB]), rng.getrandbits(64))
        do(c.read, h, 0, 5 * MiB)
        do(c.read, h, rng.randrange(4 * MiB), 300 * KiB)
        c.fsync(h)
    for h in handles:
        c.close(h)
    do(lambda p: [x for x in c.readdir(p)], "/s")
    do(lambda p: (c.stat(p).kind.name, c.stat(p).size), "/s/f1")
    do(c.unlink, "/s")
    do(c.unlink, "/s/f0")
    do(c.open, "/s/f0", 0)
    do(c.readdir, "/s/f1")
    return out


def test_parity(file_clients, provider):
    inline = _script(file_clients(provider, "inline", container="parity-i"), 3)
    offload = _script(file_clients(provider, "offload", container="parity-o"), 3)
    assert inline == offload
    assert ("NOT_EMPTY", None) in inline and ("NOT_FOUND", None) in inline


def test_shim_channel_stays_small(file_clients):
    c = file_clients("rdmasim", "offload")
    h = c.open("/big", RDWR | CREATE)
    for i in range(16):
        c.write_pattern(h, i * 4 * MiB, 4 * MiB, i)
    for i in range(16):
        c.read(h, i * 4 * MiB, 4 * MiB)
    c.close(h)
    assert c.shim_bytes <= c.commands * 4 * KiB
    assert c.shim_bytes < 16 * KiB


def test_many_hosts_share_mounts(file_clients):
    a = file_clients("stream", "offload")
    b = file_clients("stream", "offload")
    h = a.open("/shared", RDWR | CREATE)
    n, crc = a.write_pattern(h, 0, 5000, 1)
    a.close(h)
    hb = b.open("/shared", 0)
    assert b.read(hb, 0, 5000) == (n, crc)
    b.close(hb)


def test_runjob(file_clients):
    from ros2store.bench.workload import JobSpec
    c = file_clients("stream", "offload")
    c.mkdir("/j")
    job = JobSpec("write", 4096, 64 * KiB, "/j/job0", seed=5, op_count=32)
    s = c.run_job(job)
    assert s.ops == 32 and s.bytes == 32 * 4096 and not s.error


def test_proxy_restart_remount(harness):
    t = harness.alice
    e = harness.engine
    cfg = ProxyConfig(e.ctrl_address, e.data_address, t.tenant_id, t.secret)
    p1 = ProxyServer(cfg).start()
    c = OffloadClient(p1.address).connect()
    c.mount("dfs")
    h = c.open("/kept", RDWR | CREATE)
    expect = c.write_pattern(h, 0, 100 * KiB, 9)
    c.fsync(h)
    c.close(h)
    c.shutdown()
    p1.stop()
    p2 = ProxyServer(cfg).start()
    try:
        c2 = OffloadClient(p2.address).connect()
        c2.mount("dfs")
        h = c2.open("/kept", 0)
        assert c2.read(h, 0, 100 * KiB) == expect
        c2.shutdown()
    finally:
        p2.stop()


def test_kill_proxy_mid_run(harness, file_clients):
    t, e = harness.alice, harness.engine
    daemon = spawn_proxy(ProxyConfig(e.ctrl_address, e.data_address, t.tenant_id, t.secret, "rdmasim"))
    c = OffloadClient(daemon.addresses[0]).connect()
    c.mount("kill")
    h = c.open("/safe", RDWR | CREATE)
    safe = c.write_pattern(h, 0, 3 * MiB, 42)
    c.fsync(h)
    c.close(h)
    errors = []

    def churn():
        hh = c.open("/busy", RDWR | CREATE)
        try:
            for i in range(10_000):
                c.write_pattern(hh, (i % 8) * MiB, MiB, i)
        except Ros2Error as exc:
            errors.append(exc.status)

    th = threading.Thread(target=churn)
    th.start()
    threading.Event().wait(0.5)
    daemon.kill()
    th.join(30)
    assert errors == [Status.PROXY_UNAVAILABLE]
    assert _status(c.stat, "/safe") == Status.PROXY_UNAVAILABLE
    c.shutdown()
    # the store is still coherent from an inline client
    inline = file_clients("rdmasim", "inline", container="kill")
    hs = inline.open("/safe", 0)
    assert inline.read(hs, 0, 3 * MiB) == safe
    inline.close(hs)
    st = inline.stat("/busy")
    hb = inline.open("/busy", 0)
    n, _ = inline.read(hb, 0, st.size + MiB)
    assert n == st.size
    assert sorted(inline.readdir("/")) == ["busy", "safe"]


@pytest.mark.parametrize("provider", PROVIDERS)
def test_proxy_config_file(tmp_path, harness, provider):
    from ros2store.procs import proxy_config_text
    from ros2store.proxy import load_proxy_config
    t, e = harness.alice, harness.engine
    cfg = ProxyConfig(e.ctrl_address, e.data_address, t.tenant_id, t.secret, provider, workers=2,
                      buffer_pool_bytes=8 * MiB)
    path = tmp_path / "proxy.conf"
    path.write_text(proxy_config_text(cfg))
    back = load_proxy_config(str(path))
    assert (back.engine_ctrl, back.tenant_id, back.secret, back.provider, back.workers, back.buffer_pool_bytes) == \
        (tuple(e.ctrl_address), t.tenant_id, t.secret, provider, 2, 8 * MiB)
    path.write_text("provider = carrier-pigeon\n")
    assert _status(load_proxy_config, str(path)) == Status.CONFIG
