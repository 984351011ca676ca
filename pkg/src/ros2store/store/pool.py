"""Pools, containers and versioned extent objects.

A pool is a backing file of 4 KiB blocks (block 0 is the header) plus an
in-memory SCM heap, both described by the manifest.  Every update commits
one extent at a fresh container epoch; the newest image of an object is kept
as a segment map while older extents stay around for historical reads until
aggregation reclaims them.

Locking: each object has a re-entrant lock that serializes its updates,
punches and fetches.  ``_meta`` orders manifest appends with the in-memory
changes they describe, so a checkpoint always sees a consistent picture.
"""

from __future__ import annotations

import itertools
import logging
import os
import secrets
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional

from ..checksum import crc32c
from ..errors import Ros2Error, Status
from .blockmap import BLOCK_SIZE, BlockMap, Run
from .extents import Extent, ExtentInfo, SegmentMap, Tier, visible_at
from .manifest import (ContainerRec, EpochRec, ExtentRec, HorizonRec, Manifest, PoolRec,
                       ReclaimRec, Record, SnapshotRec)

log = logging.getLogger(__name__)

SCM_THRESHOLD = 4096
POOL_MAGIC = b"ROS2POOL"
POOL_VERSION = 1
POOL_HEADER = struct.Struct("<8sIIQQ")  # magic, version, block_size, capacity, pool_id
MAX_OFFSET = 1 << 63


def tier_place(length: int) -> Tier:
    if length <= 0:
        raise Ros2Error(Status.INVALID_ARGUMENT, "length must be positive")
    return Tier.SCM if length <= SCM_THRESHOLD else Tier.NVME


def manifest_path(nvme_path: str) -> str:
    return nvme_path + ".manifest"


@dataclass(frozen=True)
class ObjectID:
    container_id: int
    hi: int
    lo: int


@dataclass
class FetchResult:
    data: bytes
    checksum: int
    epoch: int
    extents: list[ExtentInfo]


class ScmHeap:
    """Byte-addressable tier: handles to immutable payloads held in memory."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.used = 0
        self._blobs: dict[int, bytes] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def fits(self, n: int) -> bool:
        return self.used + n <= self.capacity

    def put(self, data: bytes) -> int:
        with self._lock:
            h = next(self._ids)
            self._blobs[h] = data
            self.used += len(data)
            return h

    def get(self, handle: int) -> bytes:
        return self._blobs[handle]

    def free(self, handle: int) -> None:
        with self._lock:
            self.used -= len(self._blobs.pop(handle))

    def corrupt(self, handle: int, bit: int) -> None:
        """Flip one stored bit (fault injection)."""
        b = bytearray(self._blobs[handle])
        b[bit // 8] ^= 1 << (bit % 8)
        self._blobs[handle] = bytes(b)


@dataclass
class StoredObject:
    extents: list[Extent] = field(default_factory=list)  # ascending epoch
    segmap: SegmentMap = field(default_factory=SegmentMap)
    horizon: int = 0  # images older than this may have been reclaimed
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def latest_epoch(self) -> int:
        return self.extents[-1].epoch if self.extents else 0


class Container:
    def __init__(self, container_id: int, pool_id: int, label: str = ""):
        self.container_id = container_id
        self.pool_id = pool_id
        self.label = label
        self._epoch = 0
        self.snapshots: set[int] = set()
        self.objects: dict[tuple[int, int], StoredObject] = {}
        self._lock = threading.Lock()

    @property
    def epoch(self) -> int:
        return self._epoch

    def next_epoch(self) -> int:
        with self._lock:
            self._epoch += 1
            return self._epoch

    def observe_epoch(self, epoch: int) -> None:
        with self._lock:
            if epoch > self._epoch:
                self._epoch = epoch

    def lookup(self, hi: int, lo: int) -> Optional[StoredObject]:
        return self.objects.get((hi, lo))

    def obtain(self, hi: int, lo: int) -> StoredObject:
        with self._lock:
            obj = self.objects.get((hi, lo))
            if obj is None:
                obj = self.objects[(hi, lo)] = StoredObject()
            return obj


class Pool:
    def __init__(self, pool_id: int, scm_capacity: int, nvme_path: str, nvme_capacity: int,
                 fd: int, manifest: Manifest, strict: bool = False):
        self.pool_id = pool_id
        self.scm_capacity = scm_capacity
        self.nvme_path = nvme_path
        self.nvme_capacity = nvme_capacity
        self.strict = strict
        self.blocks = BlockMap(nvme_capacity // BLOCK_SIZE)
        self.scm = ScmHeap(scm_capacity)
        self.containers: dict[int, Container] = {}
        self._fd = fd
        self._manifest = manifest
        self._meta = threading.Lock()
        self._cont_ids = itertools.count(1)
        self._agg_lock = threading.Lock()
        self.closed = False

    # -- lifecycle ----------------------------------------------------------
    @classmethod
    def create(cls, scm_capacity: int, nvme_path: str, nvme_capacity: int,
               strict: bool = False) -> "Pool":
        if scm_capacity <= 0 or nvme_capacity <= 0:
            raise Ros2Error(Status.INVALID_ARGUMENT, "capacities must be positive")
        if nvme_capacity % BLOCK_SIZE:
            raise Ros2Error(Status.UNALIGNED, f"nvme capacity {nvme_capacity} not a multiple of {BLOCK_SIZE}")
        if nvme_capacity < 2 * BLOCK_SIZE:
            raise Ros2Error(Status.INVALID_ARGUMENT, "nvme capacity must hold the header and one block")
        mpath = manifest_path(nvme_path)
        if os.path.exists(nvme_path) or os.path.exists(mpath):
            raise Ros2Error(Status.EXISTS, nvme_path)
        pool_id = secrets.randbits(63)
        try:
            fd = os.open(nvme_path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o644)
            os.ftruncate(fd, nvme_capacity)
            os.pwrite(fd, POOL_HEADER.pack(POOL_MAGIC, POOL_VERSION, BLOCK_SIZE, nvme_capacity, pool_id), 0)
            os.fsync(fd)
        except FileExistsError:
            raise Ros2Error(Status.EXISTS, nvme_path) from None
        except OSError as exc:
            raise Ros2Error(Status.IO, f"{nvme_path}: {exc}") from None
        manifest = Manifest.create(mpath, [PoolRec(pool_id, scm_capacity, nvme_capacity, BLOCK_SIZE)])
        return cls(pool_id, scm_capacity, nvme_path, nvme_capacity, fd, manifest, strict)

    @classmethod
    def open(cls, nvme_path: str, strict: bool = False) -> "Pool":
        """Reopen a pool, rebuilding all state from the manifest."""
        try:
            fd = os.open(nvme_path, os.O_RDWR)
        except OSError as exc:
            raise Ros2Error(Status.IO, f"{nvme_path}: {exc}") from None
        try:
            raw = os.pread(fd, POOL_HEADER.size, 0)
            if len(raw) < POOL_HEADER.size:
                raise Ros2Error(Status.POOL_CORRUPT, "short pool header")
            magic, version, bsize, capacity, pool_id = POOL_HEADER.unpack(raw)
            if magic != POOL_MAGIC or version != POOL_VERSION or bsize != BLOCK_SIZE:
                raise Ros2Error(Status.POOL_CORRUPT, "bad pool header")
            if os.fstat(fd).st_size != capacity:
                raise Ros2Error(Status.POOL_CORRUPT, "backing file size does not match header")
            records = Manifest.load(manifest_path(nvme_path))
            if not records or not isinstance(records[0], PoolRec):
                raise Ros2Error(Status.POOL_CORRUPT, "manifest does not start with a pool record")
            head = records[0]
            if head.pool_id != pool_id or head.nvme_capacity != capacity:
                raise Ros2Error(Status.POOL_CORRUPT, "manifest belongs to another pool")
            pool = cls(pool_id, head.scm_capacity, nvme_path, capacity, fd,
                       Manifest(manifest_path(nvme_path)), strict)
            pool._replay(records[1:])
        except Exception:
            os.close(fd)
            raise
        return pool

    def _replay(self, records: list[Record]) -> None:
        pending: dict[tuple[int, int, int], dict[int, Extent]] = {}
        horizons: dict[tuple[int, int, int], int] = {}
        top_cid = 0
        for rec in records:
            if isinstance(rec, ContainerRec):
                self.containers[rec.container_id] = Container(rec.container_id, self.pool_id, rec.label)
                top_cid = max(top_cid, rec.container_id)
                continue
            cont = self.containers.get(rec.container_id)
            if cont is None:
                raise Ros2Error(Status.POOL_CORRUPT, f"record for unknown container {rec.container_id}")
            if isinstance(rec, ExtentRec):
                key = (rec.container_id, rec.hi, rec.lo)
                ext = Extent(rec.offset, rec.length, rec.epoch, rec.checksum, rec.tier)
                if rec.tier is Tier.SCM:
                    ext.location = self.scm.put(rec.payload)
                elif rec.tier is Tier.NVME:
                    self.blocks.reserve(rec.runs)
                    ext.location = rec.runs
                pending.setdefault(key, {})[rec.epoch] = ext
                cont.observe_epoch(rec.epoch)
            elif isinstance(rec, ReclaimRec):
                ext = pending.get((rec.container_id, rec.hi, rec.lo), {}).pop(rec.epoch, None)
                if ext is None:
                    raise Ros2Error(Status.POOL_CORRUPT, f"reclaim of unknown extent at epoch {rec.epoch}")
                self._release(ext)
            elif isinstance(rec, SnapshotRec):
                cont.snapshots.add(rec.epoch)
            elif isinstance(rec, HorizonRec):
                key = (rec.container_id, rec.hi, rec.lo)
                horizons[key] = max(horizons.get(key, 0), rec.epoch)
            elif isinstance(rec, EpochRec):
                cont.observe_epoch(rec.epoch)
        for (cid, hi, lo), by_epoch in pending.items():
            obj = self.containers[cid].obtain(hi, lo)
            obj.extents = [by_epoch[e] for e in sorted(by_epoch)]
            obj.segmap = visible_at(obj.extents, None)
            obj.horizon = horizons.get((cid, hi, lo), 0)
        for (cid, hi, lo), h in horizons.items():
            self.containers[cid].obtain(hi, lo).horizon = h
        self._cont_ids = itertools.count(top_cid + 1)
        if self._manifest.size > self._checkpoint_budget():
            self.checkpoint()

    def flush(self) -> None:
        """Durability barrier: backing file and manifest reach stable storage."""
        try:
            os.fsync(self._fd)
            self._manifest.sync()
        except OSError as exc:
            raise Ros2Error(Status.IO, str(exc)) from None

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.flush()
        self._manifest.close()
        os.close(self._fd)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- containers ---------------------------------------------------------
    def create_container(self, label: str = "") -> Container:
        with self._meta:
            if label and any(c.label == label for c in self.containers.values()):
                raise Ros2Error(Status.EXISTS, f"container label {label!r}")
            cid = next(self._cont_ids)
            self._manifest.append(ContainerRec(cid, label))
            cont = self.containers[cid] = Container(cid, self.pool_id, label)
            return cont

    def container(self, container_id: int) -> Container:
        try:
            return self.containers[container_id]
        except KeyError:
            raise Ros2Error(Status.UNKNOWN_CONTAINER, str(container_id)) from None

    def container_by_label(self, label: str) -> Optional[Container]:
        for c in list(self.containers.values()):
            if c.label == label:
                return c
        return None

    def snapshot(self, container_id: int, epoch: Optional[int] = None) -> int:
        """Pin an epoch so aggregation keeps its image readable."""
        cont = self.container(container_id)
        e = cont.epoch if epoch is None else epoch
        with self._meta:
            self._manifest.append(SnapshotRec(container_id, e))
            cont.snapshots.add(e)
        return e

    # -- object I/O ---------------------------------------------------------
    def update(self, oid: ObjectID, offset: int, payload, client_checksum: int) -> int:
        n = len(payload)
        if n == 0:
            raise Ros2Error(Status.INVALID_ARGUMENT, "empty update")
        if offset < 0 or offset + n > MAX_OFFSET:
            raise Ros2Error(Status.INVALID_ARGUMENT, "extent outside object address space")
        crc = crc32c(payload)
        if crc != client_checksum:
            raise Ros2Error(Status.CHECKSUM_MISMATCH,
                            f"payload crc {crc:#010x} != client {client_checksum:#010x}")
        cont = self.container(oid.container_id)
        obj = cont.obtain(oid.hi, oid.lo)
        tier = tier_place(n)
        with obj.lock:
            if tier is Tier.SCM:
                data = bytes(payload)
                if not self.scm.fits(n):
                    self.aggregate()
                    if not self.scm.fits(n):
                        raise Ros2Error(Status.ENOSPC, "SCM tier full")
                location = self.scm.put(data)
                rec_payload, runs = data, None
            else:
                runs = self._alloc_blocks(-(-n // BLOCK_SIZE))
                try:
                    self._write_runs(runs, payload)
                except Exception:
                    self.blocks.release(runs)
                    raise
                location, rec_payload = runs, None
            epoch = cont.next_epoch()
            ext = Extent(offset, n, epoch, crc, tier, location)
            with self._meta:
                self._manifest.append(ExtentRec(oid.container_id, oid.hi, oid.lo, epoch, offset, n,
                                                crc, tier, rec_payload, runs))
                obj.extents.append(ext)
                obj.segmap.insert(ext)
            return epoch

    def punch(self, oid: ObjectID, offset: int, length: int) -> int:
        if length <= 0 or offset < 0 or offset + length > MAX_OFFSET:
            raise Ros2Error(Status.INVALID_ARGUMENT, "bad punch range")
        cont = self.container(oid.container_id)
        obj = cont.obtain(oid.hi, oid.lo)
        with obj.lock:
            epoch = cont.next_epoch()
            hole = Extent(offset, length, epoch, 0, Tier.HOLE)
            with self._meta:
                self._manifest.append(ExtentRec(oid.container_id, oid.hi, oid.lo, epoch, offset,
                                                length, 0, Tier.HOLE))
                obj.extents.append(hole)
                obj.segmap.insert(hole)
            self._aggregate_object(cont, oid.hi, oid.lo, obj)
            return epoch

    def fetch(self, oid: ObjectID, offset: int, length: int,
              at_epoch: Optional[int] = None) -> FetchResult:
        if length <= 0:
            raise Ros2Error(Status.INVALID_ARGUMENT, "fetch length must be positive")
        if offset < 0 or offset + length > MAX_OFFSET:
            raise Ros2Error(Status.INVALID_ARGUMENT, "range outside object address space")
        cont = self.container(oid.container_id)
        obj = cont.lookup(oid.hi, oid.lo)
        if obj is None:
            if self.strict:
                raise Ros2Error(Status.UNKNOWN_OBJECT, f"{oid.hi:#x}.{oid.lo:#x}")
            zeros = bytes(length)
            return FetchResult(zeros, crc32c(zeros), at_epoch if at_epoch is not None else 0, [])
        end = offset + length
        with obj.lock:
            if at_epoch is None or at_epoch >= obj.latest_epoch:
                segmap = obj.segmap
                epoch = obj.latest_epoch if at_epoch is None else at_epoch
            else:
                if at_epoch < obj.horizon and at_epoch not in cont.snapshots:
                    raise Ros2Error(Status.EPOCH_RECLAIMED,
                                    f"epoch {at_epoch} is older than reclaim horizon {obj.horizon}")
                segmap = visible_at(obj.extents, at_epoch)
                epoch = at_epoch
            segs = [s for s in segmap.overlapping(offset, end) if s[2].tier is not Tier.HOLE]
            infos: list[ExtentInfo] = []
            # fast path: the request is exactly one stored extent
            if len(segs) == 1 and segs[0][2].offset == offset and segs[0][2].length == length:
                x = segs[0][2]
                data = self._load(x)
                return FetchResult(data, x.checksum, epoch, [self._info(x)])
            out = bytearray(length)
            loaded: dict[int, bytes] = {}
            for s, e, x in segs:
                src = loaded.get(id(x))
                if src is None:
                    src = loaded[id(x)] = self._load(x)
                    infos.append(self._info(x))
                out[s - offset : e - offset] = memoryview(src)[s - x.offset : e - x.offset]
        data = bytes(out)
        return FetchResult(data, crc32c(data), epoch, infos)

    @staticmethod
    def _info(x: Extent) -> ExtentInfo:
        return ExtentInfo(x.offset, x.length, x.epoch, x.checksum, x.tier)

    def object_end(self, oid: ObjectID) -> int:
        """One past the last byte of non-hole data in the newest image."""
        obj = self.container(oid.container_id).lookup(oid.hi, oid.lo)
        if obj is None:
            return 0
        with obj.lock:
            return obj.segmap.end()

    # -- tiers --------------------------------------------------------------
    def _alloc_blocks(self, nblocks: int) -> list[Run]:
        try:
            return self.blocks.alloc(nblocks)
        except Ros2Error as exc:
            if exc.status != Status.ENOSPC:
                raise
        self.aggregate()
        return self.blocks.alloc(nblocks)

    def _write_runs(self, runs: list[Run], payload) -> None:
        view = memoryview(payload).cast("B")
        pos = 0
        for start, count in runs:
            chunk = view[pos : pos + count * BLOCK_SIZE]
            try:
                os.pwritev(self._fd, [chunk], start * BLOCK_SIZE)
            except OSError as exc:
                raise Ros2Error(Status.IO, f"backing write: {exc}") from None
            pos += len(chunk)

    def _load(self, x: Extent) -> bytes:
        """Stored bytes of one extent, verified against its checksum."""
        if x.tier is Tier.SCM:
            data = self.scm.get(x.location)
        else:
            # one pread per run: the kernel fills a fresh bytes object, which
            # avoids a second large transient buffer
            parts = []
            left = x.length
            try:
                for start, count in x.location:
                    n = min(count * BLOCK_SIZE, left)
                    parts.append(os.pread(self._fd, n, start * BLOCK_SIZE))
                    left -= n
            except OSError as exc:
                raise Ros2Error(Status.IO, f"backing read: {exc}") from None
            data = parts[0] if len(parts) == 1 else b"".join(parts)
            if len(data) != x.length:
                raise Ros2Error(Status.IO, "short read from backing file")
        if crc32c(data) != x.checksum:
            raise Ros2Error(Status.MEDIA_CORRUPTION,
                            f"extent @{x.offset}+{x.length} epoch {x.epoch} fails its checksum")
        return data

    def _release(self, x: Extent) -> None:
        if x.tier is Tier.SCM:
            self.scm.free(x.location)
        elif x.tier is Tier.NVME:
            self.blocks.release(x.location)

    def locate(self, oid: ObjectID, offset: int) -> tuple[Tier, int]:
        """Where the newest byte at ``offset`` is stored: a file offset for
        NVME, or an SCM heap handle plus the byte index inside it (encoded as
        ``handle << 32 | index``).  Used for fault injection."""
        obj = self.container(oid.container_id).lookup(oid.hi, oid.lo)
        segs = list(obj.segmap.overlapping(offset, offset + 1)) if obj else []
        if not segs or segs[0][2].tier is Tier.HOLE:
            raise Ros2Error(Status.UNKNOWN_OBJECT, "no stored byte at that offset")
        x = segs[0][2]
        rel = offset - x.offset
        if x.tier is Tier.SCM:
            return Tier.SCM, (x.location << 32) | rel
        for start, count in x.location:
            if rel < count * BLOCK_SIZE:
                return Tier.NVME, start * BLOCK_SIZE + rel
            rel -= count * BLOCK_SIZE
        raise AssertionError("offset beyond extent runs")

    # -- accounting ---------------------------------------------------------
    def nvme_footprint(self) -> int:
        """Blocks referenced by live NVME extents (should equal blocks in use)."""
        total = 0
        for cont in list(self.containers.values()):
            for obj in list(cont.objects.values()):
                with obj.lock:
                    total += sum(x.footprint() for x in obj.extents)
        return total

    # -- aggregation --------------------------------------------------------
    def aggregate(self) -> int:
        """Reclaim extents that no current or pinned image can see.

        Objects locked by other threads are skipped; this runs on the
        allocation path and must not wait on them.
        """
        freed = 0
        with self._agg_lock:
            for cont in list(self.containers.values()):
                for (hi, lo), obj in list(cont.objects.items()):
                    if not obj.lock.acquire(blocking=False):
                        continue
                    try:
                        freed += self._aggregate_object(cont, hi, lo, obj)
                    finally:
                        obj.lock.release()
        if self._manifest.size > self._checkpoint_budget():
            self.checkpoint()
        return freed

    def _aggregate_object(self, cont: Container, hi: int, lo: int, obj: StoredObject) -> int:
        needed = obj.segmap.extents()
        if len(needed) == len(obj.extents):
            return 0
        for e in cont.snapshots:
            if e < obj.latest_epoch:
                needed |= visible_at(obj.extents, e).extents()
        dead = [x for x in obj.extents if x not in needed]
        if not dead:
            return 0
        horizon = obj.latest_epoch
        recs: list[Record] = [ReclaimRec(cont.container_id, hi, lo, x.epoch) for x in dead]
        recs.append(HorizonRec(cont.container_id, hi, lo, horizon))
        with self._meta:
            self._manifest.append(*recs)
            obj.extents = [x for x in obj.extents if x in needed]
            obj.horizon = max(obj.horizon, horizon)
        for x in dead:
            self._release(x)
        return len(dead)

    # -- checkpoint ---------------------------------------------------------
    def _checkpoint_budget(self) -> int:
        return 2 * self.scm.used + 128 * self._extent_count() + (16 << 20)

    def _extent_count(self) -> int:
        return sum(len(o.extents) for c in list(self.containers.values())
                   for o in list(c.objects.values()))

    def checkpoint(self) -> None:
        """Rewrite the manifest as the minimal record set for the current state."""
        with self._meta:
            recs: list[Record] = [PoolRec(self.pool_id, self.scm_capacity, self.nvme_capacity, BLOCK_SIZE)]
            for cont in list(self.containers.values()):
                cid = cont.container_id
                recs.append(ContainerRec(cid, cont.label))
                recs.append(EpochRec(cid, cont.epoch))
                recs.extend(SnapshotRec(cid, e) for e in sorted(cont.snapshots))
                for (hi, lo), obj in list(cont.objects.items()):
                    if obj.horizon:
                        recs.append(HorizonRec(cid, hi, lo, obj.horizon))
                    for x in obj.extents:
                        recs.append(ExtentRec(
                            cid, hi, lo, x.epoch, x.offset, x.length, x.checksum, x.tier,
                            self.scm.get(x.location) if x.tier is Tier.SCM else None,
                            x.location if x.tier is Tier.NVME else None))
            os.fsync(self._fd)
            self._manifest.replace(recs)
        log.info("manifest checkpointed: %d records, %d bytes", len(recs), self._manifest.size)


def create_pool(scm_capacity: int, nvme_path: str, nvme_capacity: int, strict: bool = False) -> Pool:
    return Pool.create(scm_capacity, nvme_path, nvme_capacity, strict)


def open_pool(nvme_path: str, strict: bool = False) -> Pool:
    return Pool.open(nvme_path, strict)


def create_container(pool: Pool, label: str = "") -> Container:
    return pool.create_container(label)
