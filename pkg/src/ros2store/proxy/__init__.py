"""DPU-style offload: a proxy process hosting the file client, and the host-side shim."""

from .clients import MODES, BufferPool, InlineClient, JobSummary, OffloadClient, StatInfo, mode_select
from .server import ProxyConfig, ProxyServer, load_proxy_config, serve
from .shim import MAX_SHIM_FRAME, ShimCommand, ShimOp, ShimReply, pattern_bytes

__all__ = [
    "MAX_SHIM_FRAME", "MODES", "BufferPool", "InlineClient", "JobSummary", "OffloadClient", "ProxyConfig",
    "ProxyServer", "ShimCommand", "ShimOp", "ShimReply", "StatInfo", "load_proxy_config", "mode_select",
    "pattern_bytes", "serve",
]
