"""Acquisition client: decompose an image, upload what the store lacks, commit.

The pipeline runs as threads joined by bounded queues::

    sequential read -> hash workers -> checker -> uploaders -> commit

The read is one ordered pass over the whole image that also yields the
image digest. The manifest is committed only after every upload succeeded.
"""

import logging
import os
import queue
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import partial
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, BinaryIO, Callable, Dict, List, Optional, Tuple, Union

from ..errors import (
    AcquisitionError,
    ConfigError,
    CoverageError,
    DigestMismatch,
    ExtentOutOfBounds,
    ProtocolError,
    ResumableFailure,
    StoreError,
)
from ..models import (
    AcquisitionReport,
    ArtifactKind,
    BenchmarkReport,
    BenchmarkRun,
    ByteSource,
    Digest,
    FuzzyDigest,
    ImageSource,
    InspectionReport,
    InventoryRow,
    Manifest,
    PhaseTimings,
)
from ..models.image import READ_CHUNK
from ..models.reports import duplicate_histogram
from ..tools.fat import (
    MAX_ARTIFACT_SIZE,
    PlannedArtifact,
    finish_artifact,
    plan_artifacts,
    wants_fuzzy,
)
from ..tools.hashing import ContentHasher, FuzzyHasher
from ..tools.wire import PutStatus
from .remote import RemoteStore, StoreBackend, open_store
from .server import start_server, stop_server
from .store import MAX_CHECK_BATCH, EvidenceStore

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_DEPTH = 256
DEFAULT_UPLOAD_CONNECTIONS = 4
DEFAULT_BUFFER_BYTES = 256 * 1024 * 1024

_POLL = 0.1
_DONE = object()

# per-artifact outcome of deduplication
_INTRA = "intra"
_STORED = "store"
_UPLOAD = "upload"


@dataclass
class AcquisitionConfig:
    case_id: str = ""
    investigator_id: str = ""
    disk_id: str = ""
    endpoint: Optional[str] = None
    store_root: Optional[Path] = None
    check_batch: int = MAX_CHECK_BATCH
    hash_workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    upload_connections: int = DEFAULT_UPLOAD_CONNECTIONS
    compute_fuzzy: bool = True
    max_artifact_size: int = MAX_ARTIFACT_SIZE
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    buffer_bytes: int = DEFAULT_BUFFER_BYTES
    link_mbit: Optional[float] = None
    acquired_at: Optional[datetime] = None

    def __post_init__(self) -> None:
        if not 1 <= self.check_batch <= MAX_CHECK_BATCH:
            raise ConfigError(
                f"check_batch must be within 1..{MAX_CHECK_BATCH}, "
                f"got {self.check_batch}"
            )
        if self.hash_workers < 1:
            raise ConfigError("hash_workers must be >= 1")
        if self.upload_connections < 1:
            raise ConfigError("upload_connections must be >= 1")
        if self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")
        if self.buffer_bytes < 0:
            raise ConfigError("buffer_bytes must be >= 0")
        if self.max_artifact_size < 1:
            raise ConfigError("max_artifact_size must be positive")
        if self.endpoint and self.store_root:
            raise ConfigError("Give a server endpoint or a store root, not both")


class _Aborted(Exception):
    """Raised inside a stage once another stage has failed."""


class _Stages:
    """Threads, failure and abort signalling shared by the pipeline stages."""

    def __init__(self) -> None:
        self.abort = threading.Event()
        self.failure: Optional[BaseException] = None
        self.failed_stage = ""
        self._lock = threading.Lock()
        self._threads: List[threading.Thread] = []

    def fail(self, stage: str, exc: BaseException) -> None:
        with self._lock:
            if self.failure is None:
                self.failure = exc
                self.failed_stage = stage
        self.abort.set()

    def spawn(self, name: str, target: Callable[[], None]) -> None:
        def run() -> None:
            try:
                target()
            except _Aborted:
                pass
            except BaseException as e:
                logger.debug("Stage %s failed: %s", name, e)
                self.fail(name.split("-")[0], e)

        thread = threading.Thread(target=run, name=name, daemon=True)
        self._threads.append(thread)
        thread.start()

    def put(self, q: "queue.Queue[Any]", item: Any) -> None:
        while True:
            if self.abort.is_set():
                raise _Aborted()
            try:
                q.put(item, timeout=_POLL)
                return
            except queue.Full:
                continue

    def get(self, q: "queue.Queue[Any]", patience: Optional[float] = None) -> Any:
        """Next item; raises ``queue.Empty`` after ``patience`` seconds idle."""
        waited = 0.0
        while True:
            if self.abort.is_set():
                raise _Aborted()
            try:
                return q.get(timeout=_POLL)
            except queue.Empty:
                waited += _POLL
                if patience is not None and waited >= patience:
                    raise

    def join(self) -> None:
        for thread in self._threads:
            thread.join()


class _SequentialReader:
    """Reads the image front to back exactly once, hashing as it goes."""

    def __init__(self, image: ByteSource, chunk_size: int = READ_CHUNK):
        self.image = image
        self.chunk_size = chunk_size
        self.position = 0
        self.bytes_read = 0
        self.hasher = ContentHasher()
        self._buf = b""
        self._at = 0

    def read(self, length: int) -> List[bytes]:
        pieces = []
        while length:
            if self._at == len(self._buf):
                take = min(self.chunk_size, self.image.size - self.position)
                if take <= 0:
                    raise ExtentOutOfBounds(self.position, length, self.image.size)
                self._buf = self.image.read_at(self.position, take)
                self._at = 0
                self.position += take
                self.bytes_read += take
                self.hasher.update(self._buf)
            n = min(length, len(self._buf) - self._at)
            pieces.append(self._buf[self._at : self._at + n])
            self._at += n
            length -= n
        return pieces

    @property
    def offset(self) -> int:
        """Image offset of the next byte ``read`` returns."""
        return self.position - len(self._buf) + self._at

    def finish(self) -> Digest:
        if self.position != self.image.size or self._at != len(self._buf):
            raise CoverageError(
                f"Sequential pass stopped at {self.position} of {self.image.size} bytes"
            )
        return self.hasher.digest()


class _PayloadBuffer:
    """Artifact bytes kept from the sequential pass until they are uploaded.

    Up to ``limit`` bytes are held in memory; the rest go to an anonymous
    spool file, so nothing is ever read from the image a second time.
    """

    def __init__(self, limit: int):
        self.limit = limit
        self.in_memory = 0
        self.spilled_bytes = 0
        self._pieces: Dict[int, List[Union[bytes, Tuple[int, int]]]] = {}
        self._spool: Optional[BinaryIO] = None
        self._spool_end = 0
        self._lock = threading.Lock()

    def append(self, idx: int, chunk: bytes) -> None:
        piece: Union[bytes, Tuple[int, int]]
        with self._lock:
            if self.in_memory + len(chunk) <= self.limit:
                self.in_memory += len(chunk)
                piece = chunk
            else:
                if self._spool is None:
                    self._spool = tempfile.TemporaryFile(prefix="dedupacq-spool-")
                    logger.info("Payload buffer full; spilling to a spool file")
                os.pwrite(self._spool.fileno(), chunk, self._spool_end)
                piece = (self._spool_end, len(chunk))
                self._spool_end += len(chunk)
                self.spilled_bytes += len(chunk)
            self._pieces.setdefault(idx, []).append(piece)

    def take(self, idx: int) -> List[bytes]:
        """Remove and return the chunks of one artifact."""
        with self._lock:
            pieces = self._pieces.pop(idx, [])
            chunks = []
            for piece in pieces:
                if isinstance(piece, bytes):
                    self.in_memory -= len(piece)
                    chunks.append(piece)
                else:
                    assert self._spool is not None
                    offset, length = piece
                    chunks.append(os.pread(self._spool.fileno(), length, offset))
            return chunks

    def drop(self, idx: int) -> None:
        with self._lock:
            for piece in self._pieces.pop(idx, []):
                if isinstance(piece, bytes):
                    self.in_memory -= len(piece)

    def close(self) -> None:
        with self._lock:
            self._pieces.clear()
            self.in_memory = 0
            if self._spool is not None:
                self._spool.close()
                self._spool = None


class _Sweep:
    """The sequential pass plus the hash worker pool.

    Every artifact is pinned to one worker and streamed to it chunk by chunk,
    so no artifact is ever joined in memory for hashing. Each worker queue
    holds at most ``depth // workers`` chunks of at most ``READ_CHUNK``
    bytes. When ``payloads`` is given the chunks are also kept there for the
    uploaders. Every hashed index is forwarded to ``out`` when one is given.
    """

    def __init__(
        self,
        image: ByteSource,
        planned: List[PlannedArtifact],
        stages: _Stages,
        workers: int,
        compute_fuzzy: bool,
        depth: int,
        out: "Optional[queue.Queue[Any]]" = None,
        payloads: Optional[_PayloadBuffer] = None,
    ):
        self.image = image
        self.planned = planned
        self.stages = stages
        self.workers = workers
        self.compute_fuzzy = compute_fuzzy
        self.out = out
        self.payloads = payloads
        per_worker = max(1, depth // workers)
        self.hash_qs: "List[queue.Queue[Any]]" = [
            queue.Queue(maxsize=per_worker) for _ in range(workers)
        ]
        self.digests: List[Optional[Digest]] = [None] * len(planned)
        self.fuzzies: List[Optional[FuzzyDigest]] = [None] * len(planned)
        self.reader = _SequentialReader(image)
        self.image_digest: Optional[Digest] = None
        self.hash_done = 0.0
        self._live = workers
        self._lock = threading.Lock()

    def start(self) -> None:
        for n in range(self.workers):
            self.stages.spawn(f"hash-{n}", partial(self._hash, self.hash_qs[n]))

    def _hash(self, hash_q: "queue.Queue[Any]") -> None:
        open_hashers: Dict[int, Tuple[ContentHasher, Optional[FuzzyHasher]]] = {}
        while True:
            item = self.stages.get(hash_q)
            if item is _DONE:
                break
            idx, chunk, last = item
            hashers = open_hashers.get(idx)
            if hashers is None:
                fuzzy = None
                if self.compute_fuzzy and wants_fuzzy(self.planned[idx]):
                    fuzzy = FuzzyHasher()
                hashers = open_hashers[idx] = (ContentHasher(), fuzzy)
            content, fuzzy = hashers
            content.update(chunk)
            if fuzzy is not None:
                fuzzy.update(chunk)
            if not last:
                continue
            del open_hashers[idx]
            self.digests[idx] = content.digest()
            if fuzzy is not None:
                self.fuzzies[idx] = fuzzy.digest()
            if self.out is not None:
                self.stages.put(self.out, idx)
        with self._lock:
            self._live -= 1
            last_worker = self._live == 0
        if last_worker:
            self.hash_done = time.perf_counter()
            if self.out is not None:
                self.stages.put(self.out, _DONE)

    def read(self) -> None:
        """Run the sequential pass on the calling thread."""
        segments = sorted(
            (ext.offset, ext.length, idx)
            for idx, planned in enumerate(self.planned)
            for ext in planned.extents
        )
        pending = [len(p.extents) for p in self.planned]
        for offset, length, idx in segments:
            if offset != self.reader.offset:
                raise CoverageError(f"Artifact extents leave a hole before {offset}")
            pieces = self.reader.read(length)
            pending[idx] -= 1
            hash_q = self.hash_qs[idx % self.workers]
            for n, piece in enumerate(pieces):
                if self.payloads is not None:
                    self.payloads.append(idx, piece)
                last = pending[idx] == 0 and n == len(pieces) - 1
                self.stages.put(hash_q, (idx, piece, last))
        self.image_digest = self.reader.finish()
        for hash_q in self.hash_qs:
            self.stages.put(hash_q, _DONE)
        logger.info(
            "Read %d bytes in one pass; image digest %s",
            self.reader.bytes_read,
            self.image_digest,
        )


class _AcquisitionRun:
    def __init__(
        self,
        image: ImageSource,
        planned: List[PlannedArtifact],
        config: AcquisitionConfig,
        store: StoreBackend,
    ):
        self.image = image
        self.planned = planned
        self.config = config
        self.store = store
        self.batch_limit = min(config.check_batch, store.max_check_batch)
        self.stages = _Stages()
        depth = config.queue_depth
        self.check_q: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
        self.upload_q: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
        self.payloads = _PayloadBuffer(config.buffer_bytes)
        self.sweep = _Sweep(
            image,
            planned,
            self.stages,
            config.hash_workers,
            config.compute_fuzzy,
            depth,
            out=self.check_q,
            payloads=self.payloads,
        )
        self.outcome: List[Optional[str]] = [None] * len(planned)
        self.uploaded = 0
        self.payload_bytes = 0
        self.check_done = 0.0
        self.upload_done = 0.0
        self._live_uploaders = config.upload_connections
        self._lock = threading.Lock()

    def digest_at(self, idx: int) -> Digest:
        digest = self.sweep.digests[idx]
        assert digest is not None
        return digest

    def _check_stage(self) -> None:
        first: Dict[Digest, int] = {}
        batch: List[int] = []
        while True:
            try:
                item = self.stages.get(self.check_q, patience=_POLL)
            except queue.Empty:
                self._flush(batch)
                continue
            if item is _DONE:
                break
            digest = self.digest_at(item)
            if digest in first:
                self.outcome[item] = _INTRA
                self.payloads.drop(item)
            else:
                first[digest] = item
                batch.append(item)
                if len(batch) >= self.batch_limit:
                    self._flush(batch)
        self._flush(batch)
        self.check_done = time.perf_counter()
        for _ in range(self.config.upload_connections):
            self.stages.put(self.upload_q, _DONE)

    def _flush(self, batch: List[int]) -> None:
        if not batch:
            return
        flags = self.store.has_digests([self.digest_at(i) for i in batch])
        misses = 0
        for idx, present in zip(batch, flags):
            if present:
                self.outcome[idx] = _STORED
                self.payloads.drop(idx)
            else:
                self.outcome[idx] = _UPLOAD
                misses += 1
                self.stages.put(self.upload_q, idx)
        logger.debug("CHECK of %d digests: %d missing", len(batch), misses)
        batch.clear()

    def _upload_stage(self) -> None:
        while True:
            item = self.stages.get(self.upload_q)
            if item is _DONE:
                break
            planned = self.planned[item]
            digest = self.digest_at(item)
            chunks = self.payloads.take(item)
            size = sum(len(c) for c in chunks)
            try:
                status = self.store.put_artifact(digest, chunks)
            except DigestMismatch:
                status = PutStatus.DIGEST_MISMATCH
            if status is PutStatus.DIGEST_MISMATCH:
                raise AcquisitionError(
                    f"{planned.kind.value} at offset {planned.first_offset} "
                    "no longer matches its digest on upload"
                )
            with self._lock:
                self.uploaded += 1
                self.payload_bytes += size
        with self._lock:
            self._live_uploaders -= 1
            if self._live_uploaders == 0:
                self.upload_done = time.perf_counter()

    def run(self) -> float:
        """Drive every stage to completion; returns the pipeline start time."""
        started = time.perf_counter()
        self.sweep.start()
        self.stages.spawn("check", self._check_stage)
        for n in range(self.config.upload_connections):
            self.stages.spawn(f"upload-{n}", self._upload_stage)
        try:
            self.sweep.read()
        except _Aborted:
            pass
        except BaseException as e:
            self.stages.fail("read", e)
        self.stages.join()
        self.payloads.close()

        failure = self.stages.failure
        if failure is not None:
            if self.stages.failed_stage in ("check", "upload") and isinstance(
                failure, (StoreError, ProtocolError, OSError)
            ):
                logger.error(
                    "Acquisition stopped after %d uploads: %s", self.uploaded, failure
                )
                raise ResumableFailure(self.uploaded, failure) from failure
            raise failure
        return started


def _require_identity(config: AcquisitionConfig) -> None:
    missing = [
        name
        for name in ("case_id", "investigator_id", "disk_id")
        if not getattr(config, name)
    ]
    if missing:
        raise ConfigError(f"Acquisition needs {', '.join(missing)}")


def acquire(
    image_path: Union[str, Path],
    config: AcquisitionConfig,
    store: Optional[StoreBackend] = None,
) -> AcquisitionReport:
    """Acquire one image into the store named by ``config`` (or ``store``)."""
    _require_identity(config)
    if store is None:
        with open_store(
            config.endpoint,
            config.store_root,
            config.upload_connections,
            config.link_mbit,
        ) as backend:
            return acquire(image_path, config, backend)

    wall_start = time.perf_counter()
    timings = PhaseTimings()
    with ImageSource(image_path) as image:
        planned, image_size = plan_artifacts(image, config.max_artifact_size)
        metadata_bytes = image.bytes_read
        planned_at = time.perf_counter()
        logger.info("Planned %d artifacts over %d bytes", len(planned), image_size)

        run = _AcquisitionRun(image, planned, config, store)
        started = run.run()
        read_done = time.perf_counter()
        timings.enumerate = (planned_at - wall_start) + (read_done - started)
        timings.hash = run.sweep.hash_done - started
        timings.check = run.check_done - started
        timings.upload = run.upload_done - started

        image_digest = run.sweep.image_digest
        assert image_digest is not None
        artifacts = tuple(
            finish_artifact(p, run.digest_at(i), run.sweep.fuzzies[i])
            for i, p in enumerate(planned)
        )
        manifest = Manifest(
            case_id=config.case_id,
            investigator_id=config.investigator_id,
            disk_id=config.disk_id,
            acquired_at=config.acquired_at or datetime.now(timezone.utc),
            image_size=image_size,
            image_digest=image_digest,
            artifacts=artifacts,
        )
        commit_start = time.perf_counter()
        try:
            manifest_id = store.commit_manifest(manifest)
        except (StoreError, ProtocolError, OSError) as e:
            raise ResumableFailure(run.uploaded, e) from e
        timings.commit = time.perf_counter() - commit_start
        bytes_read = image.bytes_read - metadata_bytes

    outcome = Counter(run.outcome)
    file_duplicates = sum(
        1
        for p, o in zip(planned, run.outcome)
        if p.kind is ArtifactKind.FILE_DATA and o != _UPLOAD
    )
    report = AcquisitionReport(
        manifest_id=manifest_id,
        image_path=str(image_path),
        image_size=image_size,
        image_digest=image_digest.hex,
        artifact_count=len(artifacts),
        duplicate_count=outcome[_INTRA] + outcome[_STORED],
        unique_uploaded_count=run.uploaded,
        intra_image_duplicates=outcome[_INTRA],
        store_duplicates=outcome[_STORED],
        file_artifacts=sum(1 for p in planned if p.kind is ArtifactKind.FILE_DATA),
        file_duplicates=file_duplicates,
        bytes_read=bytes_read,
        metadata_bytes_read=metadata_bytes,
        spilled_bytes=run.payloads.spilled_bytes,
        payload_bytes_transferred=run.payload_bytes,
        wall_time=time.perf_counter() - wall_start,
        timings=timings,
        histogram=duplicate_histogram(a.digest for a in artifacts),
    )
    logger.info(
        "Committed %s: %d artifacts, %d uploaded, %d duplicates",
        manifest_id,
        report.artifact_count,
        report.unique_uploaded_count,
        report.duplicate_count,
    )
    return report


def inspect(
    image_path: Union[str, Path],
    compute_fuzzy: bool = True,
    hash_workers: Optional[int] = None,
    max_artifact_size: int = MAX_ARTIFACT_SIZE,
) -> InspectionReport:
    """Enumerate and hash locally without touching any store."""
    wall_start = time.perf_counter()
    workers = hash_workers or os.cpu_count() or 1
    with ImageSource(image_path) as image:
        planned, image_size = plan_artifacts(image, max_artifact_size)
        metadata_bytes = image.bytes_read
        stages = _Stages()
        sweep = _Sweep(
            image, planned, stages, workers, compute_fuzzy, DEFAULT_QUEUE_DEPTH
        )
        sweep.start()
        try:
            sweep.read()
        except _Aborted:
            pass
        except BaseException as e:
            stages.fail("read", e)
        stages.join()
        if stages.failure is not None:
            raise stages.failure
        bytes_read = image.bytes_read - metadata_bytes

    artifacts = [
        finish_artifact(p, d, f)
        for p, d, f in zip(planned, sweep.digests, sweep.fuzzies)
        if d is not None
    ]
    assert sweep.image_digest is not None
    rows = [
        InventoryRow(
            kind=a.kind.value,
            offset=a.first_offset,
            size=a.logical_size,
            extent_count=len(a.extents),
            digest=a.digest.hex,
            label=a.label,
        )
        for a in artifacts
    ]
    return InspectionReport(
        image_path=str(image_path),
        image_size=image_size,
        image_digest=sweep.image_digest.hex,
        rows=rows,
        kind_counts=dict(sorted(Counter(a.kind.value for a in artifacts).items())),
        histogram=duplicate_histogram(a.digest for a in artifacts),
        bytes_read=bytes_read,
        wall_time=time.perf_counter() - wall_start,
    )


BENCHMARK_MODES = ("direct", "loopback")


def benchmark(
    image_path: Union[str, Path],
    config: AcquisitionConfig,
    repetitions: int = 1,
    mode: str = "direct",
    link_mbit: Optional[float] = None,
) -> BenchmarkReport:
    """Initial acquisition into a fresh store, then re-acquisition, per run."""
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    if mode not in BENCHMARK_MODES:
        raise ConfigError(f"Unknown benchmark mode {mode!r}")
    if link_mbit and mode != "loopback":
        raise ConfigError("A link throttle needs the loopback mode")
    config = replace(
        config,
        case_id=config.case_id or "benchmark",
        investigator_id=config.investigator_id or "benchmark",
        disk_id=config.disk_id or Path(image_path).name,
        endpoint=None,
        store_root=None,
    )
    report = BenchmarkReport(str(image_path), mode, link_mbit)
    for repetition in range(1, repetitions + 1):
        with tempfile.TemporaryDirectory(prefix="dedupacq-bench-") as tmp:
            store = EvidenceStore(tmp)
            if mode == "direct":
                initial = acquire(image_path, config, store)
                second = acquire(image_path, config, store)
            else:
                server, thread = start_server(store)
                try:
                    with RemoteStore(
                        server.endpoint,
                        config.upload_connections,
                        link_mbit=link_mbit,
                    ) as remote:
                        initial = acquire(image_path, config, remote)
                        second = acquire(image_path, config, remote)
                finally:
                    stop_server(server, thread)
        logger.info(
            "Run %d: initial %.2fs, re-acquisition %.2fs",
            repetition,
            initial.wall_time,
            second.wall_time,
        )
        report.runs.append(BenchmarkRun(repetition, initial, second))
    return report
