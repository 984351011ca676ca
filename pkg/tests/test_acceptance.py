"""Acceptance criteria, one test each.

Every test prints a single ``[n] PASS|FAIL <title>: <detail>`` line, so
``pytest tests/test_acceptance.py -s`` reads as a checklist.
"""

import contextlib
import os
import random
import statistics
import threading
import time

import pytest

from conftest import PROVIDERS, ClientFactory, EngineHarness
from dfs_script import ScriptRunner
from ros2store.bench.ingest import required_ingest
from ros2store.bench.workload import WorkloadSpec, prepare, run
from ros2store.checksum import crc32c
from ros2store.clock import ManualClock
from ros2store.dfs import Mount
from ros2store.errors import Ros2Error, Status
from ros2store.procs import spawn_engine, spawn_proxy
from ros2store.proxy import OffloadClient, ProxyConfig, mode_select
from ros2store.store import Tier, create_container, create_pool, open_pool
from ros2store.store.pool import ObjectID
from ros2store.tenancy import CapabilityAuthority, TenantRegistry, write_tenants
from ros2store.transport import Access, Endpoint, Perm, loopback_pair
from ros2store.wire import FrameType

KiB, MiB = 1024, 1 << 20
RDWR, CREATE, TRUNC = 0x2, 0x40, 0x200


@contextlib.contextmanager
def criterion(n, title):
    """Print exactly one verdict line for criterion ``n``; ``note`` collects the detail."""
    note = {}
    t0 = time.monotonic()
    try:
        yield note
    except BaseException as exc:
        print(f"\n[{n}] FAIL {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
              f" ({time.monotonic() - t0:.1f}s)")
        raise
    print(f"\n[{n}] PASS {title}: {note.get('detail', '')} ({time.monotonic() - t0:.1f}s)")


def _status(fn, *a, **kw):
    try:
        fn(*a, **kw)
    except Ros2Error as exc:
        return exc.status
    return Status.OK


# -- 1 -----------------------------------------------------------------------

def _isolation_attack(provider, attempts, seed):
    """Tenant bob attacks tenant alice's registered memory through real one-sided ops."""
    clock = ManualClock(1000.0)
    reg = TenantRegistry()
    alice, bob = reg.create_tenant("alice"), reg.create_tenant("bob")
    target = Endpoint(clock, name="alice-host")
    auth = CapabilityAuthority(target)
    pd_alice = target.alloc_pd(alice.tenant_id)
    rng = random.Random(seed)

    regions = []
    for _ in range(12):
        mr = target.register_memory(pd_alice, rng.choice([64, 4 * KiB, 64 * KiB]), Perm.ALL)
        mr.view[:] = rng.randbytes(mr.length)
        regions.append(mr)
    snapshot = [bytes(mr.buf) for mr in regions]

    keys = {"foreign": [], "expired": [], "revoked": [], "dead": [], "guessed": []}
    for mr in regions:
        keys["foreign"].append((mr.rkey, mr.length))
        tok = auth.issue_capability(alice, mr, 0, mr.length, Perm.ALL, ttl=1)
        keys["expired"].append((tok.rkey, mr.length))
        tok = auth.issue_capability(alice, mr, 0, mr.length, Perm.ALL)
        auth.revoke_capability(tok.token_id)
        keys["revoked"].append((tok.rkey, mr.length))
        keys["foreign"].append((auth.issue_capability(alice, mr, 0, mr.length, Perm.ALL).rkey, mr.length))
    for _ in range(4):
        gone = target.register_memory(pd_alice, 4 * KiB, Perm.ALL)
        target.deregister(gone)
        keys["dead"].append((gone.rkey, 4 * KiB))
    clock.advance(2.0)  # every ttl=1 token is now past its expiry
    live = {k for k, _ in keys["foreign"]}
    for _ in range(64):
        k = rng.getrandbits(32)
        if k not in live:
            keys["guessed"].append((k, 4 * KiB))

    attacker = Endpoint(clock, name="bob-host")
    pd_bob = attacker.alloc_pd(bob.tenant_id)
    ch_bob, ch_target = loopback_pair(provider)
    qp_bob = attacker.attach(ch_bob, pd_bob)
    qp_target = target.attach(ch_target, target.alloc_pd(bob.tenant_id))
    loot = attacker.register_memory(pd_bob, 64 * KiB, Perm.NONE)
    successes, reasons = 0, {}
    try:
        kinds = list(keys)
        for i in range(attempts):
            kind = kinds[i % len(kinds)]
            rkey, length = rng.choice(keys[kind])
            if rng.random() < 0.4:  # out-of-range window on top of the bad key
                off, n = rng.randrange(length, length + 4 * KiB), rng.randrange(1, 4 * KiB)
            else:
                off = rng.randrange(length)
                n = rng.randrange(1, length - off + 1)
            n = min(n, loot.length)
            loot.view[:n] = b"\x5a" * n
            if rng.random() < 0.5:
                c = qp_bob.one_sided_read(loot, 0, rkey, off, n)
                leaked = bytes(loot.buf[:n]) != b"\x5a" * n
            else:
                c = qp_bob.one_sided_write(loot, 0, rkey, off, n)
                leaked = False
            if c.ok or leaked:
                successes += 1
            reasons[(c.reason or c.status).name] = reasons.get((c.reason or c.status).name, 0) + 1
    finally:
        qp_bob.close()
        qp_target.close()
    untouched = all(bytes(mr.buf) == s for mr, s in zip(regions, snapshot))

    # positive control: alice's own queue pair can use a live token on the same host
    own = Endpoint(clock, name="alice-client")
    ch_a, ch_t = loopback_pair(provider)
    qp_a, qp_t = own.attach(ch_a, own.alloc_pd(alice.tenant_id)), target.attach(ch_t, pd_alice)
    try:
        buf = own.register_memory(qp_a.pd, 64, Perm.NONE)
        tok = auth.issue_capability(alice, regions[0], 0, 64, Perm.REMOTE_READ)
        control_ok = qp_a.one_sided_read(buf, 0, tok.rkey, 0, 64).ok and bytes(buf.buf) == snapshot[0][:64]
        # the same stale keys fail on their own merits even for the owner, so every layer holds by itself
        for kind, want in (("expired", Status.EXPIRED), ("revoked", Status.REVOKED)):
            for rkey, _ in keys[kind]:
                c = qp_a.one_sided_read(buf, 0, rkey, 0, 64)
                control_ok &= not c.ok and c.reason == want
        c = qp_a.one_sided_read(buf, 0, tok.rkey, 32, 64)
        control_ok &= not c.ok and c.reason == Status.OUT_OF_BOUNDS
    finally:
        qp_a.close()
        qp_t.close()
    return successes, untouched, control_ok, reasons


def test_c1_isolation():
    with criterion(1, "isolation") as note:
        t0 = time.monotonic()
        total, successes = 0, 0
        seen = {}
        for i, provider in enumerate(PROVIDERS):
            s, untouched, control_ok, reasons = _isolation_attack(provider, 10_000, seed=100 + i)
            total += 10_000
            successes += s
            for k, v in reasons.items():
                seen[k] = seen.get(k, 0) + v
            assert untouched, f"{provider}: victim memory changed"
            assert control_ok, f"{provider}: owner-side control checks did not behave"
        elapsed = time.monotonic() - t0
        note["detail"] = f"{total} attempts, {successes} successes, denials {sorted(seen.items())}"
        assert successes == 0
        assert elapsed < 60, f"took {elapsed:.1f}s"


# -- 2 -----------------------------------------------------------------------

def test_c2_capability_lifecycle():
    with criterion(2, "capability lifecycle") as note:
        clock = ManualClock(50.0)
        ep = Endpoint(clock)
        reg = TenantRegistry()
        alice = reg.create_tenant("alice")
        mr = ep.register_memory(ep.alloc_pd(alice.tenant_id), 4 * KiB, Perm.ALL)
        auth = CapabilityAuthority(ep)
        tok = auth.issue_capability(alice, mr, 0, 4 * KiB, Perm.REMOTE_READ, ttl=1)
        clock.advance(0.5)
        at_half = ep.validate_access(tok.rkey, 0, 4 * KiB, Access.READ)
        clock.advance(1.0)
        at_one_half = ep.validate_access(tok.rkey, 0, 4 * KiB, Access.READ)
        assert at_half and not at_one_half and at_one_half.reason == Status.EXPIRED
        flips = 0
        for _ in range(200):
            t = auth.issue_capability(alice, mr, 0, 4 * KiB, Perm.REMOTE_READ)
            before = ep.validate_access(t.rkey, 0, 1, Access.READ)
            auth.revoke_capability(t.token_id)
            after = ep.validate_access(t.rkey, 0, 1, Access.READ)
            flips += bool(before) and not after and after.reason == Status.REVOKED
        assert flips == 200
        note["detail"] = "ALLOW at 0.5s, EXPIRED at 1.5s, 200/200 revocations ALLOW->REVOKED"


# -- 3 -----------------------------------------------------------------------

def test_c3_checksums(tmp_path):
    with criterion(3, "end-to-end checksum") as note:
        pool = create_pool(16 * MiB, str(tmp_path / "c3.img"), 64 * MiB)
        oid = ObjectID(create_container(pool).container_id, 1, 1)
        data = random.Random(3).randbytes(4 * KiB)
        pool.update(oid, 0, data, crc32c(data))
        tier, where = pool.locate(oid, 0)
        assert tier is Tier.SCM
        handle, base = where >> 32, (where & 0xFFFFFFFF) * 8
        stored = 0
        for bit in range(4 * KiB * 8):
            pool.scm.corrupt(handle, base + bit)
            stored += _status(pool.fetch, oid, 0, 4 * KiB) == Status.MEDIA_CORRUPTION
            pool.scm.corrupt(handle, base + bit)
        assert pool.fetch(oid, 0, 4 * KiB).data == data
        pool.close()

        (tmp_path / "eng").mkdir()
        h = EngineHarness(tmp_path / "eng")
        wire, flips = {}, 0
        try:
            for provider in PROVIDERS:
                c = h.client(provider=provider)
                cid = c.cont_open("c3")
                payload = random.Random(33).randbytes(4 * KiB)
                c.update(cid, 7, 7, 0, payload)
                armed = {}
                send = c.ctrl._send

                def corrupting(header, parts, send=send, armed=armed):
                    if "bit" in armed:
                        bit = armed.pop("bit")
                        parts = list(parts)
                        body = bytearray(parts[-1])
                        body[bit // 8] ^= 1 << (bit % 8)
                        parts[-1] = body
                    send(header, parts)

                c.ctrl._send = corrupting
                caught = 0
                garbage = random.Random(7).randbytes(4 * KiB)
                for bit in range(len(garbage) * 8):
                    armed["bit"] = bit
                    caught += _status(c.update, cid, 7, 7, 0, garbage) == Status.CHECKSUM_MISMATCH
                c.ctrl._send = send
                wire[provider] = caught
                flips = len(garbage) * 8
                assert bytes(c.fetch(cid, 7, 7, 0, len(payload))[0]) == payload
        finally:
            h.close()
        note["detail"] = (f"stored {stored}/32768 MEDIA_CORRUPTION; wire "
                          + ", ".join(f"{p} {n}/{flips}" for p, n in wire.items()) + " CHECKSUM_MISMATCH")
        assert stored == 32768
        assert all(n == flips for n in wire.values())


# -- 4 -----------------------------------------------------------------------

def test_c4_dfs_oracle_equivalence(tmp_path):
    with criterion(4, "DFS oracle equivalence") as note:
        t0 = time.monotonic()
        h = EngineHarness(tmp_path, nvme_bytes=2 << 30, scm_bytes=256 << 20)
        f = ClientFactory(h)
        done = []
        try:
            for provider in PROVIDERS:
                for mode in ("inline", "offload"):
                    c = f(provider, mode, container=f"c4-{provider}-{mode}")
                    r = ScriptRunner(c, seed=4).run(10_000)
                    done.append(f"{provider}/{mode} {r.ops} ops {r.bytes_written >> 20} MiB")
        finally:
            f.close()
            h.close()
        elapsed = time.monotonic() - t0
        note["detail"] = "; ".join(done)
        assert len(done) == 4
        assert elapsed < 300, f"took {elapsed:.1f}s"


# -- 5 -----------------------------------------------------------------------

def test_c5_chunk_count_law(harness):
    with criterion(5, "chunk-count law") as note:
        rng = random.Random(5)
        client = harness.client()
        mounts = {}
        exact = 0
        for i in range(1000):
            c = 1 << rng.randrange(12, 21)  # 4 KiB .. 1 MiB
            o = rng.randrange(8 * c)
            L = rng.randrange(1, min(4 * c, 2 * MiB) + 1)
            if c not in mounts:
                m = Mount(client, f"law-{c}", chunk_size=c).mount()
                mounts[c] = (m, m.create("/f"))
            m, fh = mounts[c]
            before = client.rpc_counts["OBJ_UPDATE"]
            fh.write(o, bytes(L))
            observed = client.rpc_counts["OBJ_UPDATE"] - before
            exact += observed == -(-(o + L) // c) - o // c
        for m, fh in mounts.values():
            fh.close()
        note["detail"] = f"{exact}/1000 triples match"
        assert exact == 1000


# -- 6 -----------------------------------------------------------------------

def _parity_trace(c, seed):
    """A seeded op script; returns every observable outcome."""
    rng = random.Random(seed)
    out, handles = [], {}
    paths = [f"/p/{a}" for a in "abcdef"] + ["/p", "/p/d", "/p/d/x", "/q"]

    def do(fn, *a):
        try:
            out.append(("OK", fn(*a)))
        except Ros2Error as exc:
            out.append((exc.status.name, None))
        return out[-1]

    for _ in range(400):
        op = rng.choice(["open", "write", "write", "read", "read", "mkdir", "readdir", "stat", "unlink", "close"])
        path = rng.choice(paths)
        if op == "open":
            st, h = do(c.open, path, rng.choice([0, RDWR | CREATE, RDWR | CREATE | TRUNC]))
            if st == "OK":
                if path in handles:
                    c.close(handles[path])
                handles[path] = h
        elif op in ("write", "read", "close"):
            if not handles:
                continue
            p = rng.choice(sorted(handles))
            if op == "close":
                do(c.close, handles.pop(p))
            elif op == "write":
                do(c.write_pattern, handles[p], rng.randrange(3 * MiB), rng.choice([1, 999, 4096, 70000, MiB]),
                   rng.getrandbits(64))
            else:
                do(c.read, handles[p], rng.randrange(3 * MiB), rng.choice([10, 4096, 300 * KiB, 2 * MiB]))
        elif op == "mkdir":
            do(c.mkdir, path)
        elif op == "readdir":
            do(lambda q: list(c.readdir(q)), path)
        elif op == "stat":
            do(lambda q: (c.stat(q).kind, c.stat(q).size), path)
        else:
            if path in handles:
                c.close(handles.pop(path))
            do(c.unlink, path)
    for h in handles.values():
        c.close(h)
    return out


def test_c6_offload_parity(harness):
    with criterion(6, "offload parity") as note:
        f = ClientFactory(harness)
        details = []
        try:
            for provider in PROVIDERS:
                inline = _parity_trace(f(provider, "inline", container=f"par-i-{provider}"), 6)
                offload = _parity_trace(f(provider, "offload", container=f"par-o-{provider}"), 6)
                assert inline == offload, f"{provider}: inline and offload diverged"
                errors = sum(1 for s, _ in inline if s != "OK")
                details.append(f"{provider} {len(inline)} outcomes identical ({errors} error statuses)")
        finally:
            f.close()

        e, t = harness.engine, harness.alice
        daemon = spawn_proxy(ProxyConfig(e.ctrl_address, e.data_address, t.tenant_id, t.secret, "rdmasim"))
        try:
            c = OffloadClient(daemon.addresses[0]).connect()
            c.mount("shim64")
            h = c.open("/big", RDWR | CREATE)
            written = [c.write_pattern(h, i * 4 * MiB, 4 * MiB, i) for i in range(16)]
            read = [c.read(h, i * 4 * MiB, 4 * MiB) for i in range(16)]
            c.close(h)
            shim, commands = c.shim_bytes, c.commands
            c.shutdown()
        finally:
            daemon.terminate()
        assert written == read
        details.append(f"64 MiB each way: {shim} shim bytes for {commands} commands")
        note["detail"] = "; ".join(details)
        assert shim <= commands * 4 * KiB


# -- 7 -----------------------------------------------------------------------

class _Tap:
    def __init__(self):
        self.events = []

    def __call__(self, ev):
        self.events.append(ev)


def _leaks(events, data, window=32):
    """Control-plane frames that carry any ``window``-byte run of ``data``."""
    bad = 0
    for ev in events:
        if ev.plane != "control":
            continue
        p = bytes(ev.payload)
        bad += any(p[i:i + window] in data for i in range(0, max(0, len(p) - window + 1)))
    return bad


def test_c7_control_data_split(harness):
    with criterion(7, "control/data split") as note:
        details = []
        for provider in PROVIDERS:
            tap = _Tap()
            c = harness.client(provider=provider, tap=tap)
            cid = c.cont_open("c7")
            data = random.Random(7).randbytes(MiB)
            c.update(cid, 1, 1, 0, data)
            tap.events.clear()
            buf, _ = c.fetch(cid, 1, 1, 0, MiB)
            assert bytes(buf) == data
            ctrl_bytes = sum(e.length for e in tap.events if e.plane == "control")
            one_sided = sum(1 for e in tap.events if e.type == FrameType.ONESIDED_DATA and e.direction == "rx")
            leaks = _leaks(tap.events, data)
            assert leaks == 0 and one_sided == 1

            # through the file layer: one one-sided placement per piece at or above the threshold
            m = Mount(c, "c7fs", chunk_size=MiB).mount()
            fh = m.create("/f")
            blob = random.Random(70).randbytes(4 * MiB)
            fh.write(0, blob)
            pieces_ok = 0
            for off, length in [(0, MiB), (256 * KiB, 2 * MiB + 512 * KiB), (MiB - 4 * KiB, MiB + 4 * KiB),
                                (3 * MiB - 100, 200)]:
                tap.events.clear()
                assert fh.read(off, length) == blob[off:off + length]
                big = [(o, n) for o, n in _pieces(off, length, MiB) if n >= c.eager_threshold]
                got = sum(1 for e in tap.events if e.type == FrameType.ONESIDED_DATA and e.direction == "rx")
                # eager pieces ride inline by design; only rendezvous bytes must stay off the control plane
                pieces_ok += got == len(big) and all(_leaks(tap.events, blob[o:o + n]) == 0 for o, n in big)
            fh.close()
            assert pieces_ok == 4
            details.append(f"{provider}: 1 MiB fetch = {one_sided} one-sided transfer, "
                           f"{ctrl_bytes} control bytes, 0 payload runs on control")
        note["detail"] = "; ".join(details)


def _pieces(off, length, chunk):
    end, out = off + length, []
    while off < end:
        stop = min(end, (off // chunk + 1) * chunk)
        out.append((off, stop - off))
        off = stop
    return out


# -- 8 -----------------------------------------------------------------------

def test_c8_trend_shape(tmp_path):
    with criterion(8, "desk-scale trend shape") as note:
        t0 = time.monotonic()
        h = EngineHarness(tmp_path, scm_bytes=128 << 20, nvme_bytes=512 << 20)
        f = ClientFactory(h)
        try:
            clients = {p: f(p, "inline", container="trend") for p in PROVIDERS}
            small = {p: WorkloadSpec("randread", 4 * KiB, 16, MiB, op_count=600, provider=p, seed=8,
                                     directory="/small") for p in PROVIDERS}
            large = {p: WorkloadSpec("read", MiB, 2, 16 * MiB, op_count=16, provider=p, seed=9,
                                     directory="/large") for p in PROVIDERS}
            prepare(clients["stream"], small["stream"])
            prepare(clients["stream"], large["stream"])
            iops = {p: [] for p in PROVIDERS}
            tput = {p: [] for p in PROVIDERS}
            for _ in range(5):
                for p in PROVIDERS:
                    m, _ = run(clients[p], small[p], prepared=True)
                    assert m.valid, m.error
                    iops[p].append(m.iops)
            for _ in range(3):
                for p in PROVIDERS:
                    m, _ = run(clients[p], large[p], prepared=True)
                    assert m.valid, m.error
                    tput[p].append(m.throughput)
        finally:
            f.close()
            h.close()
        med_iops = {p: statistics.median(v) for p, v in iops.items()}
        med_tput = {p: statistics.median(v) for p, v in tput.items()}
        ratio = med_iops["rdmasim"] / med_iops["stream"]
        spread = max(med_tput.values()) / min(med_tput.values())
        elapsed = time.monotonic() - t0
        note["detail"] = (f"4K randread x16 IOPS rdmasim {med_iops['rdmasim']:.0f} vs stream "
                          f"{med_iops['stream']:.0f} (ratio {ratio:.2f}); 1M read "
                          f"{med_tput['rdmasim'] / MiB:.0f} vs {med_tput['stream'] / MiB:.0f} MiB/s "
                          f"(spread {spread:.2f}x)")
        assert ratio >= 1.0, note["detail"]
        assert spread <= 2.0, note["detail"]
        assert elapsed < 180, f"took {elapsed:.1f}s"


# -- 9 -----------------------------------------------------------------------

def test_c9_crash_durability(tmp_path):
    with criterion(9, "crash durability") as note:
        reg = TenantRegistry()
        alice = reg.create_tenant("alice")
        write_tenants(str(tmp_path / "tenants.json"), reg)
        conf = tmp_path / "engine.conf"
        conf.write_text("listen_ctrl = 127.0.0.1:0\nlisten_data = 127.0.0.1:0\n"
                        "pool.scm_bytes = 64MiB\npool.nvme_bytes = 256MiB\n"
                        "pool.nvme_path = pool.img\ntenants = tenants.json\n")

        def connect(d, provider="stream"):
            (ch, cp), (dh, dp) = d.addresses
            eng = dict(ctrl_addr=(ch, cp), data_addr=(dh, dp), tenant_id=alice.tenant_id,
                       secret=alice.secret, provider=provider)
            return mode_select("inline", engine=eng, container="durable")()

        d = spawn_engine(str(conf))
        saved = {}
        try:
            c = connect(d)
            c.mkdir("/keep")
            rng = random.Random(9)
            for i in range(24):
                path = f"/keep/f{i}"
                h = c.open(path, RDWR | CREATE)
                size = rng.choice([100, 4 * KiB, 70 * KiB, MiB + 17, 3 * MiB])
                c.write_pattern(h, 0, size, rng.getrandbits(64))
                c.fsync(h)
                c.close(h)
                saved[path] = size
            expected = {}
            for path, size in saved.items():
                h = c.open(path, 0)
                expected[path] = c.read(h, 0, size)
                c.close(h)

            # a write sweep is in flight when the engine dies
            sweeper = connect(d, "rdmasim")
            spec = WorkloadSpec("randwrite", 64 * KiB, 4, 4 * MiB, op_count=100_000, seed=1, directory="/sweep")
            th = threading.Thread(target=run, args=(sweeper, spec), daemon=True)
            th.start()
            time.sleep(1.5)
            d.kill()
            th.join(30)
            for x in (c, sweeper):
                with contextlib.suppress(Exception):
                    x.shutdown()
        finally:
            d.kill()

        d = spawn_engine(str(conf))
        try:
            c = connect(d)
            intact = 0
            for path, size in saved.items():
                h = c.open(path, 0)
                intact += c.read(h, 0, size) == expected[path]
                c.close(h)
            c.shutdown()
            restart = d.startup_seconds
        finally:
            assert d.terminate() == 0
        t = time.monotonic()
        pool = open_pool(str(tmp_path / "pool.img"))
        replay = time.monotonic() - t
        size = os.path.getsize(tmp_path / "pool.img")
        pool.close()
        note["detail"] = (f"{intact}/{len(saved)} fsync'd files intact after kill -9; replay of a "
                          f"{size >> 20} MiB pool {replay:.2f}s (daemon ready in {restart:.2f}s)")
        assert intact == len(saved)
        assert size == 256 * MiB and replay < 5.0


# -- 10 ----------------------------------------------------------------------

def test_c10_ingest():
    with criterion(10, "ingest calculator") as note:
        value = required_ingest(8, 100, 4 * MiB)
        note["detail"] = f"required_ingest(8, 100, 4 MiB) = {value} B/s"
        assert value == 3_355_443_200
