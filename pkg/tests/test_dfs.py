import os
import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import COMBOS
from dfs_script import ScriptRunner
from ros2store.dfs import CREATE, RDONLY, RDWR, TRUNC, WRONLY, Kind, Mount, chunk_pieces, split_path
from ros2store.dfs.layout import SUPER_HI, SUPER_LO
from ros2store.errors import Ros2Error, Status

KiB, MiB = 1024, 1 << 20


def _status(fn, *a, **kw):
    with pytest.raises(Ros2Error) as ei:
        fn(*a, **kw)
    return ei.value.status


@pytest.fixture
def fs(harness, provider):
    return Mount(harness.client(provider=provider), "fs").mount()


def _updates(m, fn, *a):
    before = m.client.rpc_counts["OBJ_UPDATE"]
    out = fn(*a)
    return out, m.client.rpc_counts["OBJ_UPDATE"] - before


def _fetches(m, fn, *a):
    before = m.client.rpc_counts["OBJ_FETCH"]
    out = fn(*a)
    return out, m.client.rpc_counts["OBJ_FETCH"] - before


def test_mount_fresh_and_idempotent(harness):
    c = harness.client()
    m1 = Mount(c, "fs").mount()
    assert m1.readdir("/") == []
    m1.mkdir("/x")
    m2 = Mount(c, "fs").mount()
    assert m2.root == m1.root and m2.readdir("/") == ["x"]


def test_stored_chunk_size_wins(harness):
    c = harness.client()
    Mount(c, "fs", chunk_size=64 * KiB).mount()
    assert Mount(c, "fs", chunk_size=MiB).mount().chunk_size == 64 * KiB


def test_bad_superblock(harness):
    c = harness.client()
    m = Mount(c, "fs").mount()
    c.update(m.cid, SUPER_HI, SUPER_LO, 0, b"GARBAGE!")
    assert _status(Mount(c, "fs").mount) == Status.BAD_SUPERBLOCK


def test_create_errors(fs):
    assert _status(fs.create, "/a/b") == Status.NOT_FOUND
    fs.create("/a").close()
    assert _status(fs.create, "/a/b/c") == Status.NOT_A_DIRECTORY
    assert _status(fs.open, "/missing") == Status.NOT_FOUND
    h = fs.open("/a", RDONLY)
    assert h.cached_size == 0
    assert _status(fs.write, h, 0, b"x") == Status.READ_ONLY
    h.close()
    assert _status(fs.open, "/a", RDWR | CREATE | 0x80) == Status.EXISTS


def test_write_chunk_rule(fs):
    h = fs.create("/f")
    n, ups = _updates(fs, fs.write, h, 0, os.urandom(3 * MiB))
    assert (n, ups) == (3 * MiB, 3)
    n, ups = _updates(fs, fs.write, h, 512 * KiB, os.urandom(MiB))
    assert (n, ups) == (MiB, 2)
    n, ups = _updates(fs, fs.write, h, 0, b"x" * 100)
    assert (n, ups) == (100, 1)
    h.close()
    assert fs.stat("/f").size == 3 * MiB


def test_read_pieces_and_eof(fs):
    data = os.urandom(2 * MiB)
    h = fs.create("/f")
    h.write(0, data)
    out, fetches = _fetches(fs, fs.read, h, 512 * KiB, MiB)
    assert fetches == 2 and bytes(out) == data[512 * KiB : 1536 * KiB]
    assert fs.read(h, 5 * MiB, 10) == b""
    assert bytes(fs.read(h, 2 * MiB - 5, 100)) == data[-5:]
    h.close()


def test_holes_are_zero(fs):
    h = fs.create("/sparse")
    h.write(3 * MiB, b"end")
    assert bytes(h.read(MiB, 4096)) == bytes(4096)
    assert h.cached_size == 3 * MiB + 3
    h.close()


def test_directories(fs):
    fs.mkdir("/d")
    fs.create("/d/f").close()
    assert fs.readdir("/d") == ["f"]
    assert _status(fs.unlink, "/d") == Status.NOT_EMPTY
    assert _status(fs.mkdir, "/d") == Status.EXISTS
    assert _status(fs.readdir, "/d/f") == Status.NOT_A_DIRECTORY
    assert _status(fs.open, "/d", RDWR) == Status.IS_DIRECTORY
    for name in ("zeta", "alpha", "mid"):
        fs.mkdir("/d/" + name)
    assert fs.readdir("/d") == ["alpha", "f", "mid", "zeta"]
    fs.unlink("/d/f")
    assert _status(fs.stat, "/d/f") == Status.NOT_FOUND


def test_stat_after_write(fs):
    h = fs.create("/big")
    h.write(0, os.urandom(3 * MiB))
    assert fs.stat("/big").size == 3 * MiB  # visible before close
    h.close()
    st = fs.stat("/big")
    assert st.kind is Kind.FILE and st.size == 3 * MiB
    assert fs.stat("/").kind is Kind.DIR


def test_trunc_and_wronly(fs):
    with fs.create("/t") as h:
        h.write(0, b"hello world")
    h = fs.open("/t", WRONLY | TRUNC)
    assert h.cached_size == 0
    assert _status(fs.read, h, 0, 1) == Status.BAD_HANDLE
    h.close()
    assert fs.stat("/t").size == 0


def test_unlinked_handle(fs):
    h = fs.create("/gone")
    h.write(0, b"abc")
    fs.unlink("/gone")
    assert _status(fs.read, h, 0, 3) == Status.BAD_HANDLE


def test_path_normalization(fs):
    fs.mkdir("/a")
    with fs.create("/a/b") as h:
        h.write(0, b"same")
    assert fs.stat("/a/./b").oid == fs.stat("/a/b").oid == fs.stat("//a//b").oid
    assert _status(fs.stat, "/a/b/") == Status.NOT_A_DIRECTORY
    assert fs.stat("/a/").kind is Kind.DIR
    assert _status(fs.stat, "/a/../a") == Status.INVALID_ARGUMENT
    assert _status(fs.stat, "relative") == Status.INVALID_ARGUMENT
    assert split_path("/x/./y//z") == (["x", "y", "z"], False)


def test_fsync_survives_remount(harness):
    c = harness.client()
    m = Mount(c, "fs").mount()
    data = os.urandom(700 * KiB)
    h = m.create("/keep")
    h.write(0, data)
    h.fsync()
    m2 = Mount(c, "fs").mount()
    assert m2.stat("/keep").size == len(data)
    assert bytes(m2.read_file("/keep")) == data


def test_readdir_order_stable_across_restart(tmp_path):
    from conftest import EngineHarness
    from ros2store.engine import Engine, EngineClient, EngineConfig
    h = EngineHarness(tmp_path)
    m = Mount(h.client(), "fs").mount()
    names = [f"n{random.Random(i).randrange(10**6)}" for i in range(40)]
    for n in set(names):
        m.mkdir("/" + n)
    first = m.readdir("/")
    h.close()
    e = Engine(EngineConfig(nvme_path=str(tmp_path / "pool.img")), h.registry).start()
    try:
        c = EngineClient(e.ctrl_address, e.data_address, h.alice.tenant_id, h.alice.secret).connect()
        assert Mount(c, "fs").mount().readdir("/") == first == sorted(first)
        c.close()
    finally:
        e.stop()


@settings(max_examples=300)
@given(st.integers(0, 1 << 30), st.integers(0, 64 * MiB), st.sampled_from([4096, 65536, MiB, 4 * MiB]))
def test_chunk_pieces_law(o, L, c):
    pieces = chunk_pieces(o, L, c)
    expected = 0 if L == 0 else -(-(o + L) // c) - o // c
    assert len(pieces) == expected
    pos = o
    for off, n in pieces:
        assert off == pos and n > 0 and off // c == (off + n - 1) // c
        pos += n
    assert pos == o + L


@pytest.mark.parametrize("chunk", [4096, 64 * KiB, MiB])
def test_chunk_law_observed(harness, chunk):
    m = Mount(harness.client(), f"law{chunk}", chunk_size=chunk).mount()
    h = m.create("/f")
    rng = random.Random(chunk)
    for _ in range(30):
        o, L = rng.randrange(4 * chunk), rng.randrange(1, 3 * chunk)
        _, ups = _updates(m, m.write, h, o, bytes(L))
        assert ups == -(-(o + L) // chunk) - o // chunk
    h.close()


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(min_size=1, max_size=300 * KiB), st.integers(0, 3 * MiB))
def test_read_after_write(harness, data, off):
    if not harness.clients:
        Mount(harness.client(), "raw", chunk_size=64 * KiB).mount()
    m = Mount(harness.clients[0], "raw").mount()
    with m.create("/x") as h:
        assert h.write(off, data) == len(data)
        assert bytes(h.read(off, len(data))) == data
        assert bytes(h.read(0, min(off, 4096))) == bytes(min(off, 4096))


@pytest.mark.parametrize("provider,mode", COMBOS)
def test_model_equivalence_short(file_clients, provider, mode):
    c = file_clients(provider, mode, container=f"model-{provider}-{mode}")
    r = ScriptRunner(c, seed=11, max_offset=MiB, max_len=256 * KiB).run(600)
    assert r.ops == 600
