"""Storage engine daemon, its RPC records, and the client side of a session."""

from .client import EngineClient, Fetched, PendingCall
from .config import EngineConfig, load_config, parse_size
from .rpc import Mode, Op
from .server import Engine, Session, SessionState

__all__ = [
    "Engine", "EngineClient", "EngineConfig", "Fetched", "Mode", "Op", "PendingCall", "Session",
    "SessionState", "load_config", "parse_size",
]
