"""Launch the engine and the proxy as child processes.

Both daemons print one ready line on stdout once they are listening; the
helpers here wait for it and parse out the addresses.
"""

from __future__ import annotations

import os
import re
import selectors
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from typing import Optional

from .errors import Ros2Error, Status

READY_ENGINE = re.compile(r"^ros2d: control (\S+):(\d+) data (\S+):(\d+)")
READY_PROXY = re.compile(r"^ros2 proxy: listening (\S+):(\d+)")


@dataclass
class Daemon:
    proc: subprocess.Popen
    addresses: tuple[tuple[str, int], ...]
    config_path: str
    startup_seconds: float = 0.0

    @property
    def pid(self) -> int:
        return self.proc.pid

    def kill(self) -> None:
        """SIGKILL, no chance to clean up."""
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait(10)

    def terminate(self, timeout: float = 15.0) -> int:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait(5)
        return self.proc.returncode

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.terminate()


def _launch(args: list[str], ready: re.Pattern, timeout: float, env: Optional[dict] = None):
    t0 = time.monotonic()
    proc = subprocess.Popen([sys.executable, "-m", "ros2store.cli", *args], stdout=subprocess.PIPE,
                            stderr=None, text=True, env=env)
    sel = selectors.DefaultSelector()
    sel.register(proc.stdout, selectors.EVENT_READ)
    try:
        while True:
            left = timeout - (time.monotonic() - t0)
            if left <= 0 or not sel.select(left):
                proc.kill()
                proc.wait()
                raise Ros2Error(Status.SETUP_FAILED, f"{args[0]} did not become ready in {timeout}s")
            line = proc.stdout.readline()
            if not line:
                code = proc.wait()
                raise Ros2Error(Status.SETUP_FAILED, f"{args[0]} exited with status {code} before ready")
            m = ready.match(line)
            if m:
                return proc, m, time.monotonic() - t0
    finally:
        sel.close()


def spawn_engine(config_path: str, timeout: float = 30.0) -> Daemon:
    env = dict(os.environ)
    env.pop("ROS2_CONFIG", None)
    proc, m, dt = _launch(["engine", "serve", "--config", config_path], READY_ENGINE, timeout, env)
    return Daemon(proc, ((m.group(1), int(m.group(2))), (m.group(3), int(m.group(4)))), config_path, dt)


def spawn_proxy(config, timeout: float = 30.0) -> Daemon:
    """Start a proxy for a :class:`ProxyConfig` (written to a temp file) or a config path."""
    if isinstance(config, str):
        path = config
    else:
        fd, path = tempfile.mkstemp(prefix="ros2-proxy-", suffix=".conf")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(proxy_config_text(config))
    proc, m, dt = _launch(["proxy", "--config", path], READY_PROXY, timeout)
    return Daemon(proc, ((m.group(1), int(m.group(2))),), path, dt)


def proxy_config_text(cfg) -> str:
    lines = [
        f"engine_ctrl = {cfg.engine_ctrl[0]}:{cfg.engine_ctrl[1]}",
        f"engine_data = {cfg.engine_data[0]}:{cfg.engine_data[1]}",
        f"tenant_id = {cfg.tenant_id}",
        f"secret = {cfg.secret.hex()}",
        f"provider = {cfg.provider}",
        f"listen = {cfg.listen[0]}:{cfg.listen[1]}",
        f"workers = {cfg.workers}",
        f"buffer_pool_bytes = {cfg.buffer_pool_bytes}",
        f"chunk_size = {cfg.chunk_size}",
        f"window = {cfg.window}",
    ]
    lines += [f"{k} = {v}" for k, v in cfg.extra.items()]
    return "\n".join(lines) + "\n"
