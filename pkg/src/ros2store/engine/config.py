"""Engine configuration: a ``key = value`` text file.

Recognized keys::

    listen_ctrl      = 127.0.0.1:7400
    listen_data      = 127.0.0.1:7401
    pool.scm_bytes   = 64MiB
    pool.nvme_path   = /var/lib/ros2/pool0.img
    pool.nvme_bytes  = 256MiB
    provider         = stream,rdmasim
    eager_threshold  = 16KiB
    tenants          = tenants.txt
    workers          = 8
    window_bytes     = 1MiB

Relative paths resolve against the config file's directory.  Sizes accept
the suffixes K/KiB, M/MiB, G/GiB (powers of two).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Optional

from ..errors import Ros2Error, Status
from ..transport import DEFAULT_EAGER_THRESHOLD, PROVIDERS

CONFIG_ENV = "ROS2_CONFIG"

_SIZE = re.compile(r"^\s*(\d+)\s*([kmgt]?)(i?b)?\s*$", re.I)
_UNITS = {"": 0, "k": 10, "m": 20, "g": 30, "t": 40}


def parse_size(text: str) -> int:
    m = _SIZE.match(text)
    if not m:
        raise ValueError(f"bad size {text!r}")
    return int(m.group(1)) << _UNITS[m.group(2).lower()]


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.strip().rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad address {text!r}, expected host:port")
    return host or "127.0.0.1", int(port)


@dataclass
class EngineConfig:
    nvme_path: str
    listen_ctrl: tuple[str, int] = ("127.0.0.1", 0)
    listen_data: tuple[str, int] = ("127.0.0.1", 0)
    scm_bytes: int = 64 << 20
    nvme_bytes: int = 256 << 20
    providers: tuple[str, ...] = PROVIDERS
    eager_threshold: int = DEFAULT_EAGER_THRESHOLD
    tenants_path: Optional[str] = None
    workers: int = 8
    window_bytes: int = 1 << 20
    extra: dict[str, str] = field(default_factory=dict)

    def validate(self) -> "EngineConfig":
        bad = [p for p in self.providers if p not in PROVIDERS]
        if bad or not self.providers:
            raise Ros2Error(Status.CONFIG, f"unknown provider(s) {bad or '(none)'}")
        if self.eager_threshold <= 0 or self.scm_bytes <= 0 or self.nvme_bytes <= 0:
            raise Ros2Error(Status.CONFIG, "sizes must be positive")
        if self.workers < 1:
            raise Ros2Error(Status.CONFIG, "workers must be >= 1")
        return self


_KEYS = {
    "listen_ctrl": ("listen_ctrl", parse_addr),
    "listen_data": ("listen_data", parse_addr),
    "pool.scm_bytes": ("scm_bytes", parse_size),
    "pool.nvme_bytes": ("nvme_bytes", parse_size),
    "pool.nvme_path": ("nvme_path", str),
    "provider": ("providers", lambda v: tuple(p.strip() for p in v.split(",") if p.strip())),
    "eager_threshold": ("eager_threshold", parse_size),
    "tenants": ("tenants_path", str),
    "workers": ("workers", int),
    "window_bytes": ("window_bytes", parse_size),
}


def load_config(path: Optional[str] = None) -> EngineConfig:
    """Read a config file; ``$ROS2_CONFIG`` wins over ``path`` when set."""
    path = os.environ.get(CONFIG_ENV) or path
    if not path:
        raise Ros2Error(Status.CONFIG, "no config path given")
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise Ros2Error(Status.CONFIG, f"{path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    values: dict = {}
    extra: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise Ros2Error(Status.CONFIG, f"{path}:{lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key not in _KEYS:
            extra[key] = value
            continue
        attr, conv = _KEYS[key]
        try:
            values[attr] = conv(value)
        except ValueError as exc:
            raise Ros2Error(Status.CONFIG, f"{path}:{lineno}: {exc}") from None
    if "nvme_path" not in values:
        raise Ros2Error(Status.CONFIG, f"{path}: pool.nvme_path is required")
    for attr in ("nvme_path", "tenants_path"):
        if attr in values and not os.path.isabs(values[attr]):
            values[attr] = os.path.join(base, values[attr])
    return EngineConfig(**values, extra=extra).validate()
