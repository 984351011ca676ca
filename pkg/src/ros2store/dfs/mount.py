"""POSIX-style files and directories over engine objects.

One object per file, addressed by byte offset.  A directory is one object
holding its sorted entry records, rewritten whole on every change.  File
size and mtime live in the parent's entry; a mount tracks them in memory
and writes them back on fsync and close, which is what makes a mount
coherent with itself but only last-writer-wins against other mounts.
"""

from __future__ import annotations

import collections
import logging
import secrets
import threading
from dataclasses import dataclass
from typing import Optional

from ..engine.client import REGION_TTL, EngineClient, PendingCall
from ..errors import Ros2Error, Status
from ..transport import Perm
from . import layout
from .layout import DirEntry, Kind, Superblock

log = logging.getLogger(__name__)

RDONLY = 0x0
WRONLY = 0x1
RDWR = 0x2
CREATE = 0x40
EXCL = 0x80
TRUNC = 0x200
_ACCMODE = 0x3

DEFAULT_WINDOW = 8
WHOLE_OBJECT = 1 << 62
ROOT_NAME = "/"


@dataclass
class Stat:
    kind: Kind
    size: int
    mode: int
    mtime: int
    oid: tuple[int, int]

    @property
    def is_dir(self) -> bool:
        return self.kind is Kind.DIR


class FileHandle:
    def __init__(self, mount: "Mount", entry: DirEntry, parent: tuple[int, int], flags: int):
        self.mount = mount
        self.oid = entry.oid
        self.name = entry.name
        self.parent = parent
        self.flags = flags
        self.closed = False

    @property
    def readable(self) -> bool:
        return self.flags & _ACCMODE in (RDONLY, RDWR)

    @property
    def writable(self) -> bool:
        return self.flags & _ACCMODE in (WRONLY, RDWR)

    @property
    def cached_size(self) -> int:
        return self.mount._size_of(self.oid)

    def read(self, offset: int, length: int) -> bytearray:
        return self.mount.read(self, offset, length)

    def write(self, offset: int, data) -> int:
        return self.mount.write(self, offset, data)

    def fsync(self) -> None:
        self.mount.fsync(self)

    def close(self) -> None:
        self.mount.close(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _SizeInfo:
    __slots__ = ("size", "mtime", "dirty", "parent", "name")

    def __init__(self, size: int, mtime: int, parent, name: str):
        self.size = size
        self.mtime = mtime
        self.dirty = False
        self.parent = parent
        self.name = name


class Mount:
    def __init__(self, client: EngineClient, container: str = "dfs", chunk_size: int = layout.DEFAULT_CHUNK,
                 window: int = DEFAULT_WINDOW):
        if not layout.valid_chunk(chunk_size):
            raise Ros2Error(Status.INVALID_ARGUMENT, f"chunk size {chunk_size} must be a power of two >= 4096")
        if window < 1:
            raise Ros2Error(Status.INVALID_ARGUMENT, "batching window must be >= 1")
        self.client = client
        self.container = container
        self.window = window
        self.cid = 0
        self.chunk_size = chunk_size
        self.root: tuple[int, int] = (0, 0)
        self._dirs: dict[tuple[int, int], dict[str, DirEntry]] = {}
        self._dir_locks: dict[tuple[int, int], threading.RLock] = collections.defaultdict(threading.RLock)
        self._sizes: dict[tuple[int, int], _SizeInfo] = {}
        self._lock = threading.RLock()
        self.mounted = False

    # -- mount ------------------------------------------------------------
    def mount(self) -> "Mount":
        """Read the superblock, or lay down a fresh one and an empty root."""
        c = self.client
        self.cid = c.cont_open(self.container, create=True)
        raw, _ = c.fetch(self.cid, layout.SUPER_HI, layout.SUPER_LO, 0, layout.SUPERBLOCK.size)
        if any(raw):
            sb = Superblock.decode(bytes(raw))
        else:
            root = _new_oid()
            sb = Superblock(self.chunk_size, *root)
            c.update(self.cid, root[0], root[1], 0, layout.encode_dir([]))
            c.update(self.cid, layout.SUPER_HI, layout.SUPER_LO, 0, sb.encode())
        self.chunk_size = sb.chunk_size
        self.root = (sb.root_hi, sb.root_lo)
        self.mounted = True
        return self

    def _require(self) -> None:
        if not self.mounted:
            raise Ros2Error(Status.NOT_FOUND, "not mounted")

    # -- directories ------------------------------------------------------
    def _load_dir(self, oid: tuple[int, int]) -> dict[str, DirEntry]:
        d = self._dirs.get(oid)
        if d is not None:
            return d
        with self._dir_locks[oid]:
            d = self._dirs.get(oid)
            if d is not None:
                return d
            c = self.client
            head, _ = c.fetch(self.cid, oid[0], oid[1], 0, layout.DIR_READ_HINT)
            total = layout.dir_total(head)
            if total > layout.DIR_READ_HINT:
                rest, _ = c.fetch(self.cid, oid[0], oid[1], layout.DIR_READ_HINT, total - layout.DIR_READ_HINT)
                head += rest
            d = layout.decode_dir(head)
            self._dirs[oid] = d
            return d

    def _store_dir(self, oid: tuple[int, int], entries: dict[str, DirEntry]) -> None:
        """Persist ``entries`` (folding in tracked file sizes) and cache them."""
        out = {}
        flushed = []
        with self._lock:
            for name, e in entries.items():
                info = self._sizes.get(e.oid)
                if info is not None and e.kind is Kind.FILE:
                    e = e.with_size(info.size, info.mtime)
                    if info.dirty:
                        flushed.append(info)
                out[name] = e
        self.client.update(self.cid, oid[0], oid[1], 0, layout.encode_dir(out.values()))
        for info in flushed:
            info.dirty = False
        self._dirs[oid] = out

    def _walk(self, parts: list[str]) -> tuple[int, int]:
        """Object id of the directory named by ``parts``."""
        cur = self.root
        for comp in parts:
            e = self._load_dir(cur).get(comp)
            if e is None:
                raise Ros2Error(Status.NOT_FOUND, comp)
            if e.kind is not Kind.DIR:
                raise Ros2Error(Status.NOT_A_DIRECTORY, comp)
            cur = e.oid
        return cur

    def resolve(self, path: str) -> tuple[DirEntry, Optional[tuple[int, int]]]:
        """The entry at ``path`` and the object id of its parent directory."""
        self._require()
        parts, trailing = layout.split_path(path)
        if not parts:
            return DirEntry(ROOT_NAME, *self.root, Kind.DIR, 0o755), None
        parent = self._walk(parts[:-1])
        e = self._load_dir(parent).get(parts[-1])
        if e is None:
            raise Ros2Error(Status.NOT_FOUND, path)
        if trailing and e.kind is not Kind.DIR:
            raise Ros2Error(Status.NOT_A_DIRECTORY, path)
        return self._fresh(e), parent

    def _fresh(self, e: DirEntry) -> DirEntry:
        info = self._sizes.get(e.oid)
        if info is not None and e.kind is Kind.FILE:
            return e.with_size(info.size, info.mtime)
        return e

    def _parent_of(self, path: str) -> tuple[tuple[int, int], str, bool]:
        self._require()
        parts, trailing = layout.split_path(path)
        if not parts:
            raise Ros2Error(Status.EXISTS, "/")
        return self._walk(parts[:-1]), parts[-1], trailing

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        parent, name, _ = self._parent_of(path)
        with self._dir_locks[parent]:
            entries = dict(self._load_dir(parent))
            if name in entries:
                raise Ros2Error(Status.EXISTS, path)
            entries[name] = DirEntry(name, *_new_oid(), Kind.DIR, mode, layout.now_ns())
            self._store_dir(parent, entries)

    def readdir(self, path: str) -> list[str]:
        return [e.name for e in self.scandir(path)]

    def scandir(self, path: str) -> list[DirEntry]:
        e, _ = self.resolve(path)
        if e.kind is not Kind.DIR:
            raise Ros2Error(Status.NOT_A_DIRECTORY, path)
        d = self._load_dir(e.oid)
        return [self._fresh(d[n]) for n in sorted(d)]

    def stat(self, path: str) -> Stat:
        e, _ = self.resolve(path)
        return Stat(e.kind, e.size if e.kind is Kind.FILE else 0, e.mode, e.mtime, e.oid)

    def unlink(self, path: str) -> None:
        parent, name, trailing = self._parent_of(path)
        with self._dir_locks[parent]:
            entries = dict(self._load_dir(parent))
            e = entries.get(name)
            if e is None:
                raise Ros2Error(Status.NOT_FOUND, path)
            if trailing and e.kind is not Kind.DIR:
                raise Ros2Error(Status.NOT_A_DIRECTORY, path)
            if e.kind is Kind.DIR:
                with self._dir_locks[e.oid]:
                    if self._load_dir(e.oid):
                        raise Ros2Error(Status.NOT_EMPTY, path)
                    del entries[name]
                    self._store_dir(parent, entries)
                    self._dirs.pop(e.oid, None)
            else:
                del entries[name]
                self._store_dir(parent, entries)
                with self._lock:
                    self._sizes.pop(e.oid, None)
            self.client.punch(self.cid, e.hi, e.lo, 0, WHOLE_OBJECT)

    # -- files ------------------------------------------------------------
    def open(self, path: str, flags: int = RDONLY, mode: int = 0o644) -> FileHandle:
        parent, name, trailing = self._parent_of(path)
        with self._dir_locks[parent]:
            entries = self._load_dir(parent)
            e = entries.get(name)
            if e is not None:
                if flags & CREATE and flags & EXCL:
                    raise Ros2Error(Status.EXISTS, path)
                if e.kind is Kind.DIR:
                    raise Ros2Error(Status.IS_DIRECTORY, path)
                if trailing:
                    raise Ros2Error(Status.NOT_A_DIRECTORY, path)
                e = self._fresh(e)
                self._track(e, parent)
                if flags & TRUNC:
                    if flags & _ACCMODE == RDONLY:
                        raise Ros2Error(Status.READ_ONLY, "O_TRUNC needs a writable handle")
                    if e.size:
                        self.client.punch(self.cid, e.hi, e.lo, 0, WHOLE_OBJECT)
                    self._set_size(e.oid, 0)
                return FileHandle(self, e, parent, flags)
            if not flags & CREATE:
                raise Ros2Error(Status.NOT_FOUND, path)
            if trailing:
                raise Ros2Error(Status.NOT_A_DIRECTORY, path)
            e = DirEntry(name, *_new_oid(), Kind.FILE, mode, layout.now_ns(), 0)
            entries = dict(entries)
            entries[name] = e
            self._track(e, parent)
            self._store_dir(parent, entries)
            return FileHandle(self, e, parent, flags)

    def create(self, path: str, mode: int = 0o644) -> FileHandle:
        return self.open(path, RDWR | CREATE | TRUNC, mode)

    def _track(self, e: DirEntry, parent) -> None:
        with self._lock:
            if e.oid not in self._sizes:
                self._sizes[e.oid] = _SizeInfo(e.size, e.mtime, parent, e.name)

    def _size_of(self, oid) -> int:
        info = self._sizes.get(oid)
        return info.size if info is not None else 0

    def _set_size(self, oid, size: int, grow_only: bool = False) -> None:
        with self._lock:
            info = self._sizes[oid]
            if grow_only and size <= info.size:
                info.mtime = layout.now_ns()
            else:
                info.size = size
                info.mtime = layout.now_ns()
            info.dirty = True

    def _check(self, fh: FileHandle) -> None:
        if fh.closed or fh.mount is not self:
            raise Ros2Error(Status.BAD_HANDLE, "handle is closed")
        if fh.oid not in self._sizes:
            raise Ros2Error(Status.BAD_HANDLE, "file was unlinked")

    def write(self, fh: FileHandle, offset: int, data) -> int:
        """Write ``data`` at ``offset``; returns the count written.

        Pieces go out up to ``window`` at a time.  The first failing piece
        stops further issue; if nothing was written the error is raised,
        otherwise the short count of leading pieces that landed is returned.
        """
        self._check(fh)
        if not fh.writable:
            raise Ros2Error(Status.READ_ONLY, "handle not open for writing")
        if offset < 0:
            raise Ros2Error(Status.INVALID_ARGUMENT, "negative offset")
        view = memoryview(data).cast("B")
        n = len(view)
        if n == 0:
            return 0
        hi, lo = fh.oid
        pieces = layout.chunk_pieces(offset, n, self.chunk_size)
        results = self._pipeline(
            pieces, lambda off, ln: self.client.update_async(self.cid, hi, lo, off, view[off - offset : off - offset + ln]))
        done, err = _leading(pieces, results)
        if done:
            self._set_size(fh.oid, offset + done, grow_only=True)
        if err is not None and not done:
            raise err
        return done

    def read(self, fh: FileHandle, offset: int, length: int) -> bytearray:
        """Up to ``length`` bytes at ``offset``; short at end of file, zeros over holes."""
        self._check(fh)
        n = max(0, min(length, self._size_of(fh.oid) - max(offset, 0)))
        out = bytearray(n)
        got = self.read_into(fh, offset, memoryview(out))
        return out if got == n else out[:got]

    def read_into(self, fh: FileHandle, offset: int, dst: memoryview) -> int:
        """Fill the front of ``dst`` from ``offset``; returns the count (capped at file size)."""
        self._check(fh)
        if not fh.readable:
            raise Ros2Error(Status.BAD_HANDLE, "handle not open for reading")
        if offset < 0:
            raise Ros2Error(Status.INVALID_ARGUMENT, "negative offset")
        n = max(0, min(len(dst), self._size_of(fh.oid) - offset))
        if n == 0:
            return 0
        hi, lo = fh.oid
        view = dst[:n]
        c = self.client
        pieces = layout.chunk_pieces(offset, n, self.chunk_size)
        mr = None
        if any(ln >= c.eager_threshold for _, ln in pieces):
            # one registration covers every rendezvous piece of this call
            mr = c.endpoint.register_memory(c.pd, n, Perm.REMOTE_WRITE, ttl=REGION_TTL, buffer=view)

        def issue(off, ln):
            rel = off - offset
            sink = (mr.rkey, rel) if mr is not None and ln >= c.eager_threshold else None
            return c.fetch_async(self.cid, hi, lo, off, view[rel : rel + ln], sink=sink)

        try:
            results = self._pipeline(pieces, issue)
        finally:
            if mr is not None:
                c.endpoint.deregister(mr)
        _, err = _leading(pieces, results)
        if err is not None:
            raise err
        return n

    def _pipeline(self, pieces, issue) -> list[Optional[Ros2Error]]:
        """Issue pieces keeping at most ``window`` in flight; stop issuing after a failure."""
        results: list = [None] * len(pieces)
        inflight: collections.deque[tuple[int, PendingCall]] = collections.deque()
        failed = False
        nxt = 0
        while nxt < len(pieces) or inflight:
            while not failed and nxt < len(pieces) and len(inflight) < self.window:
                inflight.append((nxt, issue(*pieces[nxt])))
                nxt += 1
            if not inflight:
                break
            i, call = inflight.popleft()
            try:
                call.result()
            except Ros2Error as exc:
                results[i] = exc
                failed = True
            if failed and nxt < len(pieces):
                for j in range(nxt, len(pieces)):
                    results[j] = Ros2Error(Status.NETWORK, "not issued")
                nxt = len(pieces)
        return results

    def fsync(self, fh: FileHandle) -> None:
        """Persist the handle's size/mtime, then a durability barrier at the engine."""
        self._check(fh)
        self._persist_size(fh)
        self.client.flush()

    def close(self, fh: FileHandle) -> None:
        if fh.closed:
            return
        try:
            if fh.oid in self._sizes:
                self._persist_size(fh)
        finally:
            fh.closed = True

    def _persist_size(self, fh: FileHandle) -> None:
        info = self._sizes.get(fh.oid)
        if info is None or not info.dirty:
            return
        parent = info.parent
        with self._dir_locks[parent]:
            entries = self._load_dir(parent)
            if info.name in entries and entries[info.name].oid == fh.oid:
                self._store_dir(parent, dict(entries))

    def sync_all(self) -> None:
        """Write back every dirty size and flush."""
        with self._lock:
            dirty = [(oid, info) for oid, info in self._sizes.items() if info.dirty]
        for oid, info in dirty:
            with self._dir_locks[info.parent]:
                entries = self._load_dir(info.parent)
                if info.name in entries and entries[info.name].oid == oid:
                    self._store_dir(info.parent, dict(entries))
        self.client.flush()

    def unmount(self) -> None:
        if self.mounted:
            self.sync_all()
            self.mounted = False

    # -- convenience ------------------------------------------------------
    def write_file(self, path: str, data, offset: int = 0) -> int:
        with self.open(path, RDWR | CREATE) as fh:
            return fh.write(offset, data)

    def read_file(self, path: str) -> bytearray:
        with self.open(path, RDONLY) as fh:
            return fh.read(0, fh.cached_size)


def _new_oid() -> tuple[int, int]:
    return secrets.randbits(63) | 1, secrets.randbits(64)


def _leading(pieces, results) -> tuple[int, Optional[Ros2Error]]:
    done = 0
    for (_, ln), r in zip(pieces, results):
        if r is not None:
            return done, r
        done += ln
    return done, None


def mount(client: EngineClient, container: str = "dfs", chunk_size: int = layout.DEFAULT_CHUNK,
          window: int = DEFAULT_WINDOW) -> Mount:
    return Mount(client, container, chunk_size, window).mount()
