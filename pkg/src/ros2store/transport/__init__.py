"""Data plane: registered memory, remote keys, queue pairs and providers."""

from .channel import PROVIDERS, Channel, ChannelClosed, FrameEvent, loopback_pair, make_channel
from .memory import ALLOW, Access, Decision, KeyTable, MemoryRegion, Perm, ProtectionDomain, deny
from .qp import (
    DEFAULT_EAGER_THRESHOLD,
    Completion,
    Endpoint,
    Notification,
    Op,
    QPState,
    QueuePair,
    Sink,
    TransferPolicy,
)

__all__ = [
    "ALLOW", "Access", "Channel", "ChannelClosed", "Completion", "DEFAULT_EAGER_THRESHOLD",
    "Decision", "Endpoint", "FrameEvent", "KeyTable", "MemoryRegion", "Notification", "Op",
    "PROVIDERS", "Perm", "ProtectionDomain", "QPState", "QueuePair", "Sink", "TransferPolicy",
    "deny", "loopback_pair", "make_channel",
]
