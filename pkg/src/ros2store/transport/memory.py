"""Protection domains, registered memory regions and the remote-key table.

Addressing is region-relative: a remote peer names memory as
``(rkey, offset)`` and never sees a virtual address.  Every key ever minted
is remembered, so a key that has been revoked, deregistered or purged after
expiry keeps answering DENY and is never handed out again.
"""

from __future__ import annotations

import enum
import itertools
import secrets
import threading
from dataclasses import InitVar, dataclass, field
from typing import Optional

from ..clock import SYSTEM_CLOCK
from ..errors import Ros2Error, Status


class Perm(enum.IntFlag):
    NONE = 0
    REMOTE_READ = 1
    REMOTE_WRITE = 2
    ALL = 3


class Access(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"

    @property
    def perm(self) -> Perm:
        return Perm.REMOTE_READ if self is Access.READ else Perm.REMOTE_WRITE


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: Optional[Status] = None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def deny(reason: Status) -> Decision:
    return Decision(False, reason)


_ids = itertools.count(1)


@dataclass(eq=False)
class ProtectionDomain:
    tenant_id: int
    pd_id: int = field(default_factory=lambda: next(_ids))
    alive: bool = True


@dataclass(eq=False)
class MemoryRegion:
    pd: ProtectionDomain
    length: int
    perms: Perm
    lkey: int
    rkey: int
    created_at: float
    ttl: float
    mr_id: int = field(default_factory=lambda: next(_ids))
    buf: bytearray = field(init=False, repr=False)
    view: memoryview = field(init=False, repr=False)
    live: bool = True
    backing: InitVar[Optional[object]] = None

    def __post_init__(self, backing):
        # like ibv_reg_mr, a caller-owned buffer can be registered in place
        self.buf = bytearray(self.length) if backing is None else backing
        self.view = memoryview(self.buf).cast("B")

    @property
    def pd_id(self) -> int:
        return self.pd.pd_id

    @property
    def tenant_id(self) -> int:
        return self.pd.tenant_id

    @property
    def expiry(self) -> Optional[float]:
        return None if self.ttl == 0 else self.created_at + self.ttl


@dataclass(eq=False)
class KeyEntry:
    """One live remote key: either a region's own rkey or a scoped token."""

    key: int
    region: MemoryRegion
    start: int
    end: int
    perms: Perm
    expiry: Optional[float]
    token_id: Optional[int] = None
    inflight: int = 0


class KeyTable:
    """Remote-key table for one endpoint.

    Revocation waits for operations already validated against the key to
    finish, so once ``revoke`` returns no access granted by that key is
    still in progress.
    """

    def __init__(self, clock=SYSTEM_CLOCK):
        self.clock = clock
        self._live: dict[int, KeyEntry] = {}
        self._tombstones: dict[int, Status] = {}
        self._minted: set[int] = set()  # handed out, not yet added
        self._cond = threading.Condition()

    # -- issuance ---------------------------------------------------------
    def mint(self) -> int:
        """A fresh 64-bit key that has never been issued by this table."""
        with self._cond:
            while True:
                key = secrets.randbits(64)
                if key and key not in self._live and key not in self._tombstones \
                        and key not in self._minted:
                    self._minted.add(key)
                    return key

    def issued_count(self) -> int:
        return len(self._live) + len(self._tombstones) + len(self._minted)

    def add(self, entry: KeyEntry) -> None:
        with self._cond:
            self._minted.remove(entry.key)
            self._live[entry.key] = entry

    def entry(self, key: int) -> Optional[KeyEntry]:
        return self._live.get(key)

    # -- removal ----------------------------------------------------------
    def retire(self, key: int, why: Status = Status.REVOKED) -> bool:
        """Tombstone ``key``; False if it was not live."""
        with self._cond:
            e = self._live.pop(key, None)
            if e is None:
                return False
            self._tombstones[key] = why
            while e.inflight:
                self._cond.wait()
            return True

    def retire_region(self, region: MemoryRegion) -> None:
        with self._cond:
            keys = [k for k, e in self._live.items() if e.region is region]
        for k in keys:
            self.retire(k, Status.REVOKED)

    def purge_expired(self, now: Optional[float] = None) -> int:
        """Move expired keys to the tombstone map (they keep reporting EXPIRED)."""
        now = self.clock.now() if now is None else now
        with self._cond:
            dead = [k for k, e in self._live.items() if _expired(e, now)]
        for k in dead:
            self.retire(k, Status.EXPIRED)
        return len(dead)

    # -- the security kernel ---------------------------------------------
    def validate(self, key: int, offset: int, length: int, kind: Access,
                 now: Optional[float] = None, pd: Optional[ProtectionDomain] = None) -> Decision:
        """ALLOW or DENY(reason) for a remote access.  Total: never raises.

        Checks run in a fixed order and the first failure is reported:
        key liveness, protection-domain binding, expiry, region bounds,
        permission, token scope.
        """
        e = self._live.get(key)
        if e is None:
            return deny(self._tombstones.get(key, Status.UNKNOWN_KEY))
        region = e.region
        if not region.live or not region.pd.alive:
            return deny(Status.REVOKED)
        if pd is not None and region.pd is not pd:
            return deny(Status.PERM)
        if now is None:
            now = self.clock.now()
        if _expired(e, now):
            return deny(Status.EXPIRED)
        if offset < 0 or length < 0 or offset + length > region.length:
            return deny(Status.OUT_OF_BOUNDS)
        if not (e.perms & kind.perm):
            return deny(Status.PERM)
        if offset < e.start or offset + length > e.end:
            return deny(Status.OUT_OF_BOUNDS)
        return ALLOW

    def acquire(self, key: int, offset: int, length: int, kind: Access,
                now: Optional[float] = None, pd: Optional[ProtectionDomain] = None):
        """Validate and, on ALLOW, pin the key until ``release``.

        Returns ``(decision, entry)``; entry is None on DENY.
        """
        with self._cond:
            d = self.validate(key, offset, length, kind, now, pd)
            if not d.allowed:
                return d, None
            e = self._live[key]
            e.inflight += 1
            return d, e

    def release(self, entry: KeyEntry) -> None:
        with self._cond:
            entry.inflight -= 1
            if entry.inflight == 0:
                self._cond.notify_all()


def _expired(e: KeyEntry, now: float) -> bool:
    if e.expiry is not None and now >= e.expiry:
        return True
    exp = e.region.expiry
    return exp is not None and now >= exp


def check_local(region: MemoryRegion, offset: int, length: int) -> None:
    if not region.live:
        raise Ros2Error(Status.REVOKED, "local region deregistered")
    if offset < 0 or length < 0 or offset + length > region.length:
        raise Ros2Error(Status.OUT_OF_BOUNDS, "local range outside region")
