"""FIO-style workload driver over a file client.

Every job owns one file and walks it with a deterministic offset sequence:
sequential patterns advance one block per op and wrap at the end of the
file, random patterns draw block-aligned offsets uniformly (with
replacement) from a PRNG seeded with ``spec.seed + job_index``.  Writes
carry a per-block seeded pattern, so a read-back pass can check every
block's CRC without the host ever holding the data.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional, Protocol

from ..checksum import crc32c
from ..errors import Ros2Error, Status
from ..proxy.shim import pattern_bytes

log = logging.getLogger(__name__)

PATTERNS = ("read", "write", "randread", "randwrite")
RESERVOIR_CAPACITY = 65536
DEFAULT_WARMUP = 0.05

O_RDONLY, O_RDWR, O_CREATE = 0x0, 0x2, 0x40


class FileClient(Protocol):
    """The digest-level file contract both inline and offload clients honour."""

    def open(self, path: str, flags: int = 0, mode: int = 0o644) -> int: ...
    def read(self, handle: int, offset: int, length: int) -> tuple[int, int]: ...
    def write_pattern(self, handle: int, offset: int, length: int, seed: int) -> tuple[int, int]: ...
    def fsync(self, handle: int) -> None: ...
    def close(self, handle: int) -> None: ...
    def mkdir(self, path: str, mode: int = 0o755) -> None: ...
    def stat(self, path: str): ...


@dataclass
class WorkloadSpec:
    pattern: str = "randread"
    block_size: int = 4096
    jobs: int = 1
    file_size: int = 64 << 20
    op_count: Optional[int] = 1000  # per job
    duration: Optional[float] = None
    provider: str = "stream"
    mode: str = "inline"
    seed: int = 0
    iodepth: int = 1
    warmup: float = DEFAULT_WARMUP
    directory: str = "/bench"

    def validate(self) -> "WorkloadSpec":
        if self.pattern not in PATTERNS:
            raise Ros2Error(Status.INVALID_ARGUMENT, f"pattern must be one of {PATTERNS}")
        if self.block_size <= 0 or self.file_size <= 0 or self.file_size % self.block_size:
            raise Ros2Error(Status.INVALID_ARGUMENT, "block_size must divide file_size")
        if self.jobs < 1 or self.iodepth < 1:
            raise Ros2Error(Status.INVALID_ARGUMENT, "jobs and iodepth must be >= 1")
        if (self.op_count is None) == (self.duration is None):
            raise Ros2Error(Status.INVALID_ARGUMENT, "give exactly one of op_count or duration")
        if not 0 <= self.warmup < 1:
            raise Ros2Error(Status.INVALID_ARGUMENT, "warmup must be a fraction in [0, 1)")
        return self

    @property
    def is_read(self) -> bool:
        return self.pattern in ("read", "randread")

    @property
    def is_random(self) -> bool:
        return self.pattern.startswith("rand")

    def job(self, index: int) -> "JobSpec":
        return JobSpec(self.pattern, self.block_size, self.file_size, f"{self.directory}/job{index}",
                       self.seed + index, self.op_count, self.duration, self.iodepth, self.warmup)


@dataclass
class JobSpec:
    pattern: str
    block_size: int
    file_size: int
    path: str
    seed: int
    op_count: Optional[int] = None
    duration: Optional[float] = None
    iodepth: int = 1
    warmup: float = DEFAULT_WARMUP

    @property
    def blocks(self) -> int:
        return self.file_size // self.block_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def block_seed(job_seed: int, block: int) -> int:
    """Pattern seed of one block of a job's file."""
    return (job_seed * 1_000_003 + block) & 0xFFFF_FFFF_FFFF_FFFF


def offsets(job: JobSpec) -> Iterator[int]:
    """The job's infinite offset sequence."""
    bs, nblocks = job.block_size, job.blocks
    if job.pattern.startswith("rand"):
        rng = random.Random(job.seed)
        while True:
            yield rng.randrange(nblocks) * bs
    else:
        for k in itertools.count():
            yield (k % nblocks) * bs


class Reservoir:
    """Uniform sample of at most ``capacity`` values (Algorithm R)."""

    def __init__(self, capacity: int = RESERVOIR_CAPACITY, seed: int = 0):
        self.capacity = capacity
        self.samples: list[float] = []
        self.seen = 0
        self._rng = random.Random(seed)

    def add(self, value: float) -> None:
        self.seen += 1
        if len(self.samples) < self.capacity:
            self.samples.append(value)
        else:
            j = self._rng.randrange(self.seen)
            if j < self.capacity:
                self.samples[j] = value


def percentile(sorted_values: list[float], p: float) -> Optional[float]:
    """Nearest-rank percentile; None for an empty sample."""
    if not sorted_values:
        return None
    rank = max(1, math.ceil(p / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass
class JobResult:
    ops: int = 0
    bytes: int = 0
    seconds: float = 0.0
    samples: list[float] = field(default_factory=list)  # latency, microseconds
    error: Optional[str] = None
    trace: Optional[list[int]] = None


def run_job(client: FileClient, job: JobSpec, trace: bool = False,
            start: Optional[threading.Barrier] = None) -> JobResult:
    """Drive one job to completion against ``client``."""
    reading = job.pattern in ("read", "randread")
    handle = client.open(job.path, O_RDONLY if reading else O_RDWR | O_CREATE)
    res = JobResult(trace=[] if trace else None)
    reservoir = Reservoir(seed=job.seed)
    seq = offsets(job)
    lock = threading.Lock()
    counter = itertools.count()
    bs = job.block_size
    warm_ops = math.ceil(job.warmup * job.op_count) if job.op_count is not None else 0
    stop = threading.Event()

    if start is not None:
        start.wait()
    t0 = time.perf_counter()
    deadline = t0 + job.duration if job.duration is not None else None
    warm_until = t0 + job.warmup * job.duration if job.duration is not None else 0.0

    def worker():
        while not stop.is_set():
            with lock:
                k = next(counter)
                if job.op_count is not None and k >= job.op_count:
                    return
                off = next(seq)
                if res.trace is not None:
                    res.trace.append(off)
            began = time.perf_counter()
            if deadline is not None and began >= deadline:
                return
            try:
                if reading:
                    n, _ = client.read(handle, off, bs)
                else:
                    n, _ = client.write_pattern(handle, off, bs, block_seed(job.seed, off // bs))
            except Ros2Error as exc:
                with lock:
                    if res.error is None:
                        res.error = str(exc)
                stop.set()
                return
            done = time.perf_counter()
            with lock:
                res.ops += 1
                res.bytes += n
                if k >= warm_ops and began >= warm_until:
                    reservoir.add((done - began) * 1e6)

    if job.iodepth == 1:
        worker()
    else:
        threads = [threading.Thread(target=worker, daemon=True) for _ in range(job.iodepth)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    res.seconds = time.perf_counter() - t0
    res.samples = reservoir.samples
    try:
        if not reading:
            client.fsync(handle)
    finally:
        client.close(handle)
    return res


@dataclass
class Metrics:
    bytes_moved: int = 0
    ops_completed: int = 0
    wall_seconds: float = 0.0
    p50_us: Optional[float] = None
    p95_us: Optional[float] = None
    p99_us: Optional[float] = None
    min_us: Optional[float] = None
    valid: bool = True
    error: Optional[str] = None
    job_ops: list[int] = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return self.bytes_moved / self.wall_seconds if self.wall_seconds > 0 else 0.0

    @property
    def iops(self) -> float:
        return self.ops_completed / self.wall_seconds if self.wall_seconds > 0 else 0.0


def aggregate(results: list[JobResult], wall_seconds: float) -> Metrics:
    samples = sorted(itertools.chain.from_iterable(r.samples for r in results))
    errors = [r.error for r in results if r.error]
    return Metrics(
        bytes_moved=sum(r.bytes for r in results),
        ops_completed=sum(r.ops for r in results),
        wall_seconds=wall_seconds,
        p50_us=percentile(samples, 50),
        p95_us=percentile(samples, 95),
        p99_us=percentile(samples, 99),
        min_us=samples[0] if samples else None,
        valid=not errors,
        error=errors[0] if errors else None,
        job_ops=[r.ops for r in results],
    )


def prepare(client: FileClient, spec: WorkloadSpec) -> None:
    """Create the job directory and lay out each job's file.

    Read patterns need full files; each block is written with its own
    pattern seed, exactly as a write workload would leave it.
    """
    parts = [p for p in spec.directory.split("/") if p]
    for depth in range(1, len(parts) + 1):
        path = "/" + "/".join(parts[:depth])
        try:
            client.mkdir(path)
        except Ros2Error as exc:
            if exc.status != Status.EXISTS:
                raise Ros2Error(Status.SETUP_FAILED, f"mkdir {path}: {exc}") from None
    for i in range(spec.jobs):
        job = spec.job(i)
        try:
            h = client.open(job.path, O_RDWR | O_CREATE)
            try:
                if spec.is_read and client.stat(job.path).size < job.file_size:
                    for b in range(job.blocks):
                        client.write_pattern(h, b * job.block_size, job.block_size, block_seed(job.seed, b))
                    client.fsync(h)
            finally:
                client.close(h)
        except Ros2Error as exc:
            raise Ros2Error(Status.SETUP_FAILED, f"layout of {job.path}: {exc}") from None


def run(client: FileClient, spec: WorkloadSpec, trace: bool = False,
        prepared: bool = False) -> tuple[Metrics, list[JobResult]]:
    """Run ``spec`` with one thread per job sharing ``client``."""
    spec.validate()
    if not prepared:
        prepare(client, spec)
    barrier = threading.Barrier(spec.jobs + 1)
    results: list[Optional[JobResult]] = [None] * spec.jobs

    def body(i: int):
        try:
            results[i] = run_job(client, spec.job(i), trace, barrier)
        except Ros2Error as exc:
            results[i] = JobResult(error=str(exc))
            barrier.abort()
        except threading.BrokenBarrierError:
            results[i] = JobResult(error="aborted: another job failed to start")

    threads = [threading.Thread(target=body, args=(i,), name=f"job{i}", daemon=True) for i in range(spec.jobs)]
    for t in threads:
        t.start()
    try:
        barrier.wait()
    except threading.BrokenBarrierError:
        pass
    t0 = time.perf_counter()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    done = [r if r is not None else JobResult(error="job did not report") for r in results]
    return aggregate(done, wall), done


def expected_crc(job: JobSpec, block: int) -> int:
    return crc32c(pattern_bytes(block_seed(job.seed, block), job.block_size))


def verify(client: FileClient, spec: WorkloadSpec, metrics: Metrics) -> list[tuple[str, int]]:
    """Read back every block a write run touched; returns the (path, offset) of mismatches."""
    bad = []
    for i, nops in enumerate(metrics.job_ops):
        job = spec.job(i)
        touched = sorted(set(itertools.islice(offsets(job), nops)))
        h = client.open(job.path, O_RDONLY)
        try:
            for off in touched:
                n, crc = client.read(h, off, job.block_size)
                if n != job.block_size or crc != expected_crc(job, off // job.block_size):
                    bad.append((job.path, off))
        finally:
            client.close(h)
    return bad
