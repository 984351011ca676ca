"""Command-line entry points: ``ros2d`` (the engine) and ``ros2`` (tools)."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import signal
import sys
import threading
from typing import Optional

from .errors import Ros2Error, Status

log = logging.getLogger("ros2store")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_CORRUPT = 0, 1, 2, 3
CLIENT_CONFIG_ENV = "ROS2_CLIENT_CONFIG"
_CORRUPT = (Status.POOL_CORRUPT, Status.MEDIA_CORRUPTION)


def _logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _until_signalled(stop) -> None:
    done = threading.Event()

    def handler(signum, frame):
        done.set()

    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, handler)
    while not done.wait(0.5):
        pass
    stop()


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- ros2d ---------------------------------------------------------------------

def engine_main(argv: Optional[list[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="ros2d", description="Storage engine daemon.")
    p.add_argument("--log-level", default="info")
    sub = p.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("serve", help="run the engine until SIGTERM")
    s.add_argument("--config", help="config file (ROS2_CONFIG overrides)")
    t = sub.add_parser("tenant-add", help="append a tenant with a fresh secret to a tenants file")
    t.add_argument("--file", required=True)
    t.add_argument("name")
    t.add_argument("--id", type=int)
    args = p.parse_args(argv)
    _logging(args.log_level)
    if args.cmd == "tenant-add":
        return _tenant_add(args)
    return _serve_engine(args.config)


def _serve_engine(config_path: Optional[str]) -> int:
    from .engine import Engine, load_config

    try:
        cfg = load_config(config_path)
        engine = Engine(cfg)
    except Ros2Error as exc:
        _err(f"ros2d: {exc}")
        return EXIT_CONFIG if exc.status in (Status.CONFIG, Status.DUPLICATE_NAME, Status.INVALID_NAME,
                                             Status.INVALID_ARGUMENT) else EXIT_FAILURE
    except OSError as exc:
        _err(f"ros2d: {exc}")
        return EXIT_CONFIG
    try:
        engine.start()
    except Ros2Error as exc:
        _err(f"ros2d: {exc}")
        if exc.status in _CORRUPT:
            return EXIT_CORRUPT
        if exc.status in (Status.INVALID_ARGUMENT, Status.UNALIGNED, Status.CONFIG):
            return EXIT_CONFIG
        return EXIT_FAILURE
    (ch, cp), (dh, dp) = engine.ctrl_address, engine.data_address
    print(f"ros2d: control {ch}:{cp} data {dh}:{dp}", flush=True)
    _until_signalled(engine.stop)
    return EXIT_OK


def _tenant_add(args) -> int:
    from .tenancy import TenantRegistry, load_tenants, write_tenants

    try:
        reg = load_tenants(args.file) if os.path.exists(args.file) else TenantRegistry()
        t = reg.create_tenant(args.name, tenant_id=args.id)
        write_tenants(args.file, reg)
    except Ros2Error as exc:
        _err(f"ros2d: {exc}")
        return EXIT_CONFIG
    print(f"{t.tenant_id} {t.name} {t.secret.hex()}")
    return EXIT_OK


# -- ros2 ----------------------------------------------------------------------

def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["engine"]:
        return engine_main(argv[1:])
    p = argparse.ArgumentParser(prog="ros2", description="File, proxy and benchmark tools.")
    p.add_argument("--log-level", default="warning")
    sub = p.add_subparsers(dest="cmd", required=True)

    d = sub.add_parser("dfs", help="file operations against a mounted container")
    d.add_argument("--config", help=f"client config (or ${CLIENT_CONFIG_ENV})")
    d.add_argument("--container", help="container name (default: config 'container' or dfs)")
    dsub = d.add_subparsers(dest="dfs_cmd", required=True)
    put = dsub.add_parser("put", help="write stdin (or --from) to a file")
    put.add_argument("path")
    put.add_argument("--from", dest="src")
    get = dsub.add_parser("get", help="write a file to stdout (or --to)")
    get.add_argument("path")
    get.add_argument("--to", dest="dst")
    for name, helptext in (("ls", "list a directory"), ("rm", "remove a file or empty directory"),
                           ("stat", "show an entry"), ("mkdir", "create a directory")):
        dsub.add_parser(name, help=helptext).add_argument("path")

    px = sub.add_parser("proxy", help="run the offload proxy until SIGTERM")
    px.add_argument("--config", required=True)

    b = sub.add_parser("bench", help="workloads, sweeps and the ingest calculator")
    bsub = b.add_subparsers(dest="bench_cmd", required=True)
    r = bsub.add_parser("run", help="run one workload")
    r.add_argument("--config", help=f"client config (or ${CLIENT_CONFIG_ENV})")
    r.add_argument("--pattern", default="randread", choices=("read", "write", "randread", "randwrite"))
    r.add_argument("--bs", default="4096")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--file-size", default="64MiB")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--ops", type=int, help="operations per job")
    g.add_argument("--runtime", type=float, help="seconds per job")
    r.add_argument("--provider", choices=("stream", "rdmasim"))
    r.add_argument("--mode", default="inline", choices=("inline", "offload"))
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--iodepth", type=int, default=1)
    r.add_argument("--verify", action="store_true", help="read back written blocks and check CRCs")
    r.add_argument("--out", help="CSV output path")
    sw = bsub.add_parser("sweep", help="run a workload matrix to a CSV grid")
    sw.add_argument("--config", help=f"client config (or ${CLIENT_CONFIG_ENV})")
    sw.add_argument("--matrix", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--markdown", help="also write a markdown table here")
    ing = bsub.add_parser("ingest", help="sustained ingest rate a node needs")
    ing.add_argument("--gpus", type=float, required=True)
    ing.add_argument("--rate", type=float, required=True, help="samples per second per GPU")
    ing.add_argument("--sample-bytes", type=float, required=True)

    args = p.parse_args(argv)
    _logging(args.log_level)
    try:
        if args.cmd == "dfs":
            return _dfs(args)
        if args.cmd == "proxy":
            return _proxy(args)
        return _bench(args)
    except Ros2Error as exc:
        _err(f"ros2: {exc}")
        return EXIT_CONFIG if exc.status in (Status.CONFIG, Status.NONPOSITIVE) else EXIT_FAILURE


def _client_config(path: Optional[str]):
    from .proxy import load_proxy_config

    path = path or os.environ.get(CLIENT_CONFIG_ENV)
    if not path:
        raise Ros2Error(Status.CONFIG, f"give --config or set {CLIENT_CONFIG_ENV}")
    return load_proxy_config(path)


def _dfs(args) -> int:
    from .dfs import CREATE, TRUNC, WRONLY, Kind, Mount
    from .engine import EngineClient

    cfg = _client_config(args.config)
    container = args.container or cfg.extra.get("container", "dfs")
    with EngineClient(cfg.engine_ctrl, cfg.engine_data, cfg.tenant_id, cfg.secret, cfg.provider).connect() as c:
        fs = Mount(c, container, cfg.chunk_size, cfg.window).mount()
        cmd = args.dfs_cmd
        if cmd == "put":
            data = open(args.src, "rb").read() if args.src else sys.stdin.buffer.read()
            with fs.open(args.path, WRONLY | CREATE | TRUNC) as fh:
                n = fh.write(0, data)
                fh.fsync()
            print(f"{n} bytes -> {args.path}")
        elif cmd == "get":
            data = fs.read_file(args.path)
            if args.dst:
                with open(args.dst, "wb") as out:
                    out.write(data)
            else:
                sys.stdout.buffer.write(data)
                sys.stdout.flush()
        elif cmd == "ls":
            for e in fs.scandir(args.path):
                tag = "d" if e.kind is Kind.DIR else "-"
                print(f"{tag} {e.size:>12} {e.name}")
        elif cmd == "rm":
            fs.unlink(args.path)
        elif cmd == "mkdir":
            fs.mkdir(args.path)
        elif cmd == "stat":
            st = fs.stat(args.path)
            print(f"kind={st.kind.name.lower()} size={st.size} mode={st.mode:o} mtime_ns={st.mtime}")
        fs.unmount()
    return EXIT_OK


def _proxy(args) -> int:
    from .proxy import ProxyServer, load_proxy_config

    try:
        cfg = load_proxy_config(args.config)
        server = ProxyServer(cfg).start()
    except Ros2Error as exc:
        _err(f"ros2 proxy: {exc}")
        return EXIT_CONFIG if exc.status == Status.CONFIG else EXIT_FAILURE
    host, port = server.address
    print(f"ros2 proxy: listening {host}:{port}", flush=True)
    _until_signalled(server.stop)
    return EXIT_OK


class _Clients:
    """Builds (provider, mode) clients for bench commands, spawning proxies on demand."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.daemons = []

    def proxy_addr(self, provider: str):
        from .engine.config import parse_addr
        from .procs import spawn_proxy

        for key in (f"proxy.{provider}", "proxy" if provider == self.cfg.provider else None):
            if key and key in self.cfg.extra:
                return parse_addr(self.cfg.extra[key])
        d = spawn_proxy(dataclasses.replace(self.cfg, provider=provider, listen=("127.0.0.1", 0), extra={}))
        self.daemons.append(d)
        return d.addresses[0]

    def __call__(self, provider: str, mode: str):
        from .proxy import mode_select

        container = self.cfg.extra.get("container", "dfs")
        if mode == "offload":
            return mode_select("offload", proxy_addr=self.proxy_addr(provider), container=container)()
        c = self.cfg
        engine = dict(ctrl_addr=c.engine_ctrl, data_addr=c.engine_data, tenant_id=c.tenant_id,
                      secret=c.secret, provider=provider)
        return mode_select("inline", engine=engine, container=container)()

    def close(self) -> None:
        for d in self.daemons:
            d.terminate()


def _bench(args) -> int:
    from .bench import report
    from .bench.ingest import required_ingest
    from .engine.config import parse_size

    if args.bench_cmd == "ingest":
        rate = required_ingest(*(int(v) if float(v).is_integer() else v
                                 for v in (args.gpus, args.rate, args.sample_bytes)))
        print(f"{rate} B/s ({report.gib_per_s(rate)})")
        return EXIT_OK

    cfg = _client_config(args.config)
    clients = _Clients(cfg)
    try:
        if args.bench_cmd == "sweep":
            from .bench.sweep import load_matrix, sweep

            rows = sweep(load_matrix(args.matrix), clients)
            report.write_csv(args.out, rows)
            md = report.markdown(rows)
            if args.markdown:
                with open(args.markdown, "w", encoding="utf-8") as fh:
                    fh.write(md)
            print(md, end="")
            return EXIT_OK if all(r.status == report.OK for r in rows) else EXIT_FAILURE

        from .bench.workload import WorkloadSpec, run, verify

        provider = args.provider or cfg.provider
        spec = WorkloadSpec(pattern=args.pattern, block_size=parse_size(args.bs), jobs=args.jobs,
                            file_size=parse_size(args.file_size),
                            op_count=None if args.runtime else (args.ops or 1000), duration=args.runtime,
                            provider=provider, mode=args.mode, seed=args.seed, iodepth=args.iodepth).validate()
        client = clients(provider, args.mode)
        try:
            metrics, _ = run(client, spec)
            row = report.ResultRow(provider, args.mode, spec.pattern, spec.block_size, spec.jobs, metrics,
                                   report.OK if metrics.valid else report.FAILED, spec.iodepth, metrics.error or "")
            if args.out:
                report.write_csv(args.out, [row])
            print(report.markdown([row]), end="")
            if args.verify and not spec.is_read:
                bad = verify(client, spec, metrics)
                print(f"verify: {len(bad)} mismatched blocks")
                if bad:
                    return EXIT_FAILURE
            return EXIT_OK if metrics.valid else EXIT_FAILURE
        finally:
            client.shutdown()
    finally:
        clients.close()


if __name__ == "__main__":
    sys.exit(main())
