"""Tenants, scoped capability tokens and per-tenant QoS buckets.

A capability token is a scoped remote key: issuing one mints a fresh key in
the endpoint's key table whose entry narrows the region to a byte range, a
permission subset and an expiry.  The token's id *is* that key, so the
value a client puts on the wire is the token itself.
"""

from __future__ import annotations

import itertools
import math
import secrets
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional, Union

from .clock import SYSTEM_CLOCK
from .errors import Ros2Error, Status
from .transport.memory import KeyEntry, MemoryRegion, Perm
from .transport.qp import Endpoint

SECRET_BYTES = 32
NO_EXPIRY = 0xFFFF_FFFF_FFFF_FFFF

# token_id, mr_id, start, end, perms, expiry (microseconds of the issuing clock), nonce
TOKEN_RECORD = struct.Struct("<QQQQBQQ")


@dataclass
class Tenant:
    tenant_id: int
    name: str
    secret: bytes = field(repr=False)


class TenantRegistry:
    def __init__(self):
        self._by_id: dict[int, Tenant] = {}
        self._by_name: dict[str, Tenant] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.qos_limits: dict[int, tuple[float, float]] = {}

    def create_tenant(self, name: str, secret: Optional[bytes] = None,
                      tenant_id: Optional[int] = None) -> Tenant:
        if not name or "\n" in name or " " in name:
            raise Ros2Error(Status.INVALID_NAME, f"bad tenant name {name!r}")
        if secret is None:
            secret = secrets.token_bytes(SECRET_BYTES)
        if len(secret) != SECRET_BYTES:
            raise Ros2Error(Status.INVALID_ARGUMENT, "tenant secret must be 32 bytes")
        with self._lock:
            if name in self._by_name:
                raise Ros2Error(Status.DUPLICATE_NAME, name)
            if tenant_id is None:
                tenant_id = next(self._ids)
                while tenant_id in self._by_id:
                    tenant_id = next(self._ids)
            elif tenant_id in self._by_id:
                raise Ros2Error(Status.DUPLICATE_NAME, f"tenant id {tenant_id} taken")
            t = Tenant(tenant_id, name, secret)
            self._by_id[tenant_id] = t
            self._by_name[name] = t
            return t

    def get(self, tenant_id: int) -> Tenant:
        try:
            return self._by_id[tenant_id]
        except KeyError:
            raise Ros2Error(Status.UNKNOWN_TENANT, str(tenant_id)) from None

    def by_name(self, name: str) -> Tenant:
        try:
            return self._by_name[name]
        except KeyError:
            raise Ros2Error(Status.UNKNOWN_TENANT, name) from None

    def __iter__(self):
        return iter(list(self._by_id.values()))

    def __len__(self) -> int:
        return len(self._by_id)


def load_tenants(path: str) -> TenantRegistry:
    """Parse a tenants file: ``<id> <name> <secret-hex> [rate_Bps burst_B]`` per line."""
    reg = TenantRegistry()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 5):
                raise Ros2Error(Status.CONFIG, f"{path}:{lineno}: expected 3 or 5 fields")
            try:
                tid, name, secret = int(parts[0]), parts[1], bytes.fromhex(parts[2])
            except ValueError as exc:
                raise Ros2Error(Status.CONFIG, f"{path}:{lineno}: {exc}") from None
            reg.create_tenant(name, secret, tid)
            if len(parts) == 5:
                reg.qos_limits[tid] = (float(parts[3]), float(parts[4]))
    return reg


def write_tenants(path: str, tenants) -> None:
    """Write a tenants file; a registry's QoS limits are kept on their tenant's line."""
    limits = getattr(tenants, "qos_limits", {})
    with open(path, "w", encoding="utf-8") as fh:
        for t in tenants:
            qos = limits.get(t.tenant_id)
            tail = f" {qos[0]!r} {qos[1]!r}" if qos else ""
            fh.write(f"{t.tenant_id} {t.name} {t.secret.hex()}{tail}\n")


@dataclass
class CapabilityToken:
    token_id: int
    tenant_id: int
    mr_id: int
    start: int
    end: int
    perms: Perm
    expiry: Optional[float]
    nonce: int

    @property
    def rkey(self) -> int:
        return self.token_id

    def encode(self) -> bytes:
        exp = NO_EXPIRY if self.expiry is None else int(round(self.expiry * 1e6))
        return TOKEN_RECORD.pack(self.token_id, self.mr_id, self.start, self.end,
                                 int(self.perms), exp, self.nonce)

    @classmethod
    def decode(cls, buf, tenant_id: int = 0) -> "CapabilityToken":
        tid, mr_id, start, end, perms, exp, nonce = TOKEN_RECORD.unpack(bytes(buf[: TOKEN_RECORD.size]))
        return cls(tid, tenant_id, mr_id, start, end, Perm(perms),
                   None if exp == NO_EXPIRY else exp / 1e6, nonce)


class CapabilityAuthority:
    """Issues and revokes scoped tokens over one endpoint's regions.

    Issuance and revocation are serialized; validation stays in the key
    table and takes no lock beyond what the table needs.
    """

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint
        self._tokens: dict[int, CapabilityToken] = {}
        self._lock = threading.Lock()

    def issue_capability(self, tenant: Union[Tenant, int], mr: MemoryRegion, start: int, end: int,
                         perms: Perm, ttl: float = 0, now: Optional[float] = None) -> CapabilityToken:
        tenant_id = tenant.tenant_id if isinstance(tenant, Tenant) else int(tenant)
        perms = Perm(perms)
        if mr.pd.tenant_id != tenant_id:
            raise Ros2Error(Status.FOREIGN_REGION, f"region {mr.mr_id} belongs to another tenant")
        if not mr.live:
            raise Ros2Error(Status.REVOKED, f"region {mr.mr_id} is deregistered")
        if start < 0 or end > mr.length or start > end:
            raise Ros2Error(Status.SCOPE_EXCEEDS_REGION, f"[{start}, {end}) outside [0, {mr.length})")
        if perms == Perm.NONE or perms & ~mr.perms:
            raise Ros2Error(Status.PERM_ESCALATION, f"{perms!r} exceeds region perms {mr.perms!r}")
        if now is None:
            now = self.endpoint.clock.now()
        expiry = None if ttl == 0 else now + ttl
        with self._lock:
            key = self.endpoint.keys.mint()
            tok = CapabilityToken(key, tenant_id, mr.mr_id, start, end, perms, expiry,
                                  secrets.randbits(64))
            self.endpoint.keys.add(KeyEntry(key, mr, start, end, perms, expiry, token_id=key))
            self._tokens[key] = tok
        return tok

    def revoke_capability(self, token_id: int) -> None:
        with self._lock:
            tok = self._tokens.pop(token_id, None)
            if tok is None:
                raise Ros2Error(Status.UNKNOWN_TOKEN, f"{token_id:#x}")
        self.endpoint.keys.retire(token_id, Status.REVOKED)

    def live_tokens(self) -> list[CapabilityToken]:
        with self._lock:
            return list(self._tokens.values())


# -- QoS ------------------------------------------------------------------

@dataclass(frozen=True)
class Admit:
    pass


@dataclass(frozen=True)
class Delay:
    until: float


ADMIT = Admit()


@dataclass
class QosBucket:
    tenant_id: int
    rate: float
    burst: float
    tokens: float = -1.0
    last_refill: Optional[float] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.rate <= 0 or self.burst <= 0:
            raise Ros2Error(Status.NONPOSITIVE, "rate and burst must be positive")
        if self.tokens < 0:
            self.tokens = float(self.burst)

    def admit(self, nbytes: int, now: float) -> Union[Admit, Delay]:
        return qos_admit(self, nbytes, now)


def qos_admit(bucket: QosBucket, nbytes: int, now: float) -> Union[Admit, Delay]:
    """Token-bucket admission.  ADMIT deducts; DELAY names the earliest admit time."""
    if nbytes > bucket.burst:
        raise Ros2Error(Status.OVERSIZED, f"{nbytes} bytes exceeds burst {bucket.burst}")
    with bucket._lock:
        if bucket.last_refill is None:
            bucket.last_refill = now
        elif now > bucket.last_refill:
            bucket.tokens = min(bucket.burst, bucket.tokens + bucket.rate * (now - bucket.last_refill))
            bucket.last_refill = now
        if bucket.tokens >= nbytes:
            bucket.tokens -= nbytes
            return ADMIT
        return Delay(bucket.last_refill + (nbytes - bucket.tokens) / bucket.rate)


class QosTable:
    """Per-tenant buckets; tenants without a configured limit are unlimited."""

    def __init__(self, clock=SYSTEM_CLOCK, limits: Optional[dict[int, tuple[float, float]]] = None):
        self.clock = clock
        self._buckets: dict[int, QosBucket] = {}
        for tid, (rate, burst) in (limits or {}).items():
            self.set_limit(tid, rate, burst)

    def set_limit(self, tenant_id: int, rate: float, burst: float) -> QosBucket:
        b = QosBucket(tenant_id, rate, burst)
        self._buckets[tenant_id] = b
        return b

    def bucket(self, tenant_id: int) -> Optional[QosBucket]:
        return self._buckets.get(tenant_id)

    def wait_admit(self, tenant_id: int, nbytes: int) -> float:
        """Block until ``nbytes`` is admitted; returns seconds spent waiting."""
        b = self._buckets.get(tenant_id)
        if b is None or nbytes == 0:
            return 0.0
        waited = 0.0
        while True:
            now = self.clock.now()
            r = qos_admit(b, nbytes, now)
            if isinstance(r, Admit):
                return waited
            pause = max(r.until - now, 1e-6)
            if math.isinf(pause):
                raise Ros2Error(Status.OVERSIZED, "bucket can never admit")
            self.clock.sleep(pause)
            waited += pause
