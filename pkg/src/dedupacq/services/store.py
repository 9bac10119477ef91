"""Content-addressed evidence store: blobs, manifests and their indexes.

On-disk layout under the store root::

    blobs/<hex2>/<hex62>     artifact bytes, named by their SHA-256
    manifests/<id>.json      canonical manifest bytes; id = SHA-256 of them
    index/digests.log        append-only, one hex digest per stored blob
    index/manifests.log      append-only, one manifest id per commit
    index/fuzzy.tsv          digest<TAB>fuzzy-digest per indexed artifact
    tmp/                     staging for uploads in flight
"""

import errno
import hashlib
import logging
import os
import re
import threading
import uuid
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, Iterator, List, Sequence, Set, Union

from ..errors import (
    BatchTooLarge,
    ConfigError,
    CoverageError,
    DanglingDigest,
    DigestMismatch,
    InvalidManifest,
    NotFound,
    StorageError,
)
from ..models import (
    ArtifactKind,
    AuditReport,
    AuditViolation,
    Digest,
    FuzzyDigest,
    Manifest,
    ManifestSummary,
    NearMatch,
    OccurrenceRecord,
    StoreStats,
    manifest_canonical_bytes,
    manifest_from_bytes,
)
from ..models.image import READ_CHUNK, format_timestamp
from ..tools.hashing import (
    FUZZY_MIN_SIZE,
    ContentHasher,
    FuzzyHasher,
    FuzzyIndex,
    near_matches,
)
from ..tools.wire import PutStatus

logger = logging.getLogger(__name__)

MAX_CHECK_BATCH = 512
LOCK_STRIPES = 256

_MANIFEST_ID_RE = re.compile(r"^[0-9a-fA-F]{64}$")

Payload = Union[bytes, Iterable[bytes]]


@contextmanager
def _storage_errors(what: str) -> Iterator[None]:
    """Report filesystem failures while writing ``what`` as StorageError."""
    try:
        yield
    except OSError as e:
        reason = "disk full" if e.errno == errno.ENOSPC else str(e)
        raise StorageError(f"Cannot store {what}: {reason}") from e


@dataclass(frozen=True)
class StoreConfig:
    root: Path
    max_check_batch: int = MAX_CHECK_BATCH

    def __post_init__(self) -> None:
        if not 1 <= self.max_check_batch <= 0xFFFF:
            raise ConfigError(
                f"max_check_batch must be within 1..65535, got {self.max_check_batch}"
            )


class EvidenceStore:
    """The server-side repository.

    Blobs are write-once. Puts of one digest serialize on a striped lock;
    reads take no locks. Manifest commits serialize on one lock so a manifest
    becomes visible together with its index entries.
    """

    def __init__(self, root: Union[str, Path], max_check_batch: int = MAX_CHECK_BATCH):
        self.config = StoreConfig(Path(root), max_check_batch)
        self.root = self.config.root
        self.blob_dir = self.root / "blobs"
        self.manifest_dir = self.root / "manifests"
        self.index_dir = self.root / "index"
        self.tmp_dir = self.root / "tmp"
        for directory in (
            self.blob_dir,
            self.manifest_dir,
            self.index_dir,
            self.tmp_dir,
        ):
            directory.mkdir(parents=True, exist_ok=True)
        self.digest_log = self.index_dir / "digests.log"
        self.manifest_log = self.index_dir / "manifests.log"
        self.fuzzy_file = self.index_dir / "fuzzy.tsv"

        self._stripes = [threading.Lock() for _ in range(LOCK_STRIPES)]
        self._log_lock = threading.Lock()
        self._commit_lock = threading.RLock()

        self._digests: Set[Digest] = set()
        self._occurrences: Dict[Digest, List[OccurrenceRecord]] = {}
        self._referenced: Dict[Digest, int] = {}
        self._summaries: Dict[str, ManifestSummary] = {}
        self._logical_bytes = 0
        self._physical_bytes = 0
        self.fuzzy_index = FuzzyIndex()

        self.stale_swept = self._sweep_tmp()
        self._replay_digests()
        self._replay_manifests()
        self._load_fuzzy()
        logger.info(
            "Opened store %s: %d blobs, %d manifests",
            self.root,
            len(self._digests),
            len(self._summaries),
        )

    @property
    def max_check_batch(self) -> int:
        return self.config.max_check_batch

    # start-up

    def _sweep_tmp(self) -> int:
        stale = [p for p in self.tmp_dir.iterdir() if p.is_file()]
        for path in stale:
            path.unlink(missing_ok=True)
        if stale:
            logger.warning(
                "Removed %d stale staging files from %s", len(stale), self.tmp_dir
            )
        return len(stale)

    def _read_log(self, path: Path) -> List[str]:
        """Complete lines of an append-only log, dropping a torn last line."""
        if not path.exists():
            return []
        data = path.read_bytes()
        if data and not data.endswith(b"\n"):
            keep = data.rfind(b"\n") + 1
            logger.warning("Truncating torn record at the end of %s", path)
            with open(path, "r+b") as fp:
                fp.truncate(keep)
            data = data[:keep]
        return data.decode("ascii", errors="replace").splitlines()

    def _replay_digests(self) -> None:
        for line in self._read_log(self.digest_log):
            try:
                self._digests.add(Digest.from_hex(line))
            except ValueError:
                logger.warning("Skipping malformed digest log line %r", line[:80])

    def _replay_manifests(self) -> None:
        for manifest_id in self._read_log(self.manifest_log):
            if manifest_id in self._summaries:
                continue
            try:
                manifest = self.get_manifest(manifest_id)
            except (NotFound, InvalidManifest) as e:
                logger.warning("Skipping manifest %s on replay: %s", manifest_id, e)
                continue
            self._index_manifest(manifest_id, manifest)

    def _load_fuzzy(self) -> None:
        if not self.fuzzy_file.exists():
            return
        entries: Dict[Digest, FuzzyDigest] = {}
        for line in self.fuzzy_file.read_text(encoding="ascii").splitlines():
            digest_hex, _, fuzzy_text = line.partition("\t")
            try:
                entries[Digest.from_hex(digest_hex)] = FuzzyDigest.parse(fuzzy_text)
            except ValueError:
                logger.warning("Skipping malformed fuzzy index line %r", line[:80])
        self.fuzzy_index.replace(entries)

    # blobs

    def blob_path(self, digest: Digest) -> Path:
        hex_digest = digest.hex
        return self.blob_dir / hex_digest[:2] / hex_digest[2:]

    def _append(self, path: Path, line: str) -> None:
        with self._log_lock:
            with open(path, "a", encoding="ascii") as fp:
                fp.write(line + "\n")
                fp.flush()
                os.fsync(fp.fileno())

    def has_digests(self, batch: Sequence[Digest]) -> List[bool]:
        if len(batch) > self.max_check_batch:
            raise BatchTooLarge(len(batch), self.max_check_batch)
        return [d in self._digests for d in batch]

    def put_artifact(self, digest: Digest, payload: Payload) -> PutStatus:
        """Stage, re-hash and publish one blob.

        The payload is never trusted: the blob appears under ``digest`` only
        if its bytes hash to it. Errors raised while producing the payload
        propagate unchanged; failures writing the store are ``StorageError``.
        """
        if isinstance(payload, (bytes, bytearray, memoryview)):
            payload = (bytes(payload),)
        with self._stripes[digest.raw[0]]:
            if digest in self._digests:
                return PutStatus.ALREADY_PRESENT
            staging = self.tmp_dir / f"{digest.hex}.{uuid.uuid4().hex}.part"
            hasher = ContentHasher()
            try:
                with _storage_errors(digest.hex):
                    fp = open(staging, "wb")
                with fp:
                    for chunk in payload:
                        hasher.update(chunk)
                        with _storage_errors(digest.hex):
                            fp.write(chunk)
                    with _storage_errors(digest.hex):
                        fp.flush()
                        os.fsync(fp.fileno())
                actual = hasher.digest()
                if actual != digest:
                    raise DigestMismatch(digest.hex, actual.hex)
                with _storage_errors(digest.hex):
                    final = self.blob_path(digest)
                    final.parent.mkdir(exist_ok=True)
                    os.replace(staging, final)
                    self._append(self.digest_log, digest.hex)
            finally:
                staging.unlink(missing_ok=True)
            self._digests.add(digest)
        logger.debug("Stored blob %s (%d bytes)", digest.hex, hasher.length)
        return PutStatus.STORED

    def _committed_path(self, digest: Digest) -> Path:
        if digest not in self._digests:
            raise NotFound(digest.hex)
        return self.blob_path(digest)

    def open_artifact(self, digest: Digest) -> BinaryIO:
        try:
            return open(self._committed_path(digest), "rb")
        except FileNotFoundError as e:
            raise NotFound(digest.hex) from e

    def get_artifact(self, digest: Digest) -> bytes:
        with self.open_artifact(digest) as fp:
            return fp.read()

    def read_artifact(
        self, digest: Digest, chunk_size: int = READ_CHUNK
    ) -> Iterator[bytes]:
        with self.open_artifact(digest) as fp:
            while chunk := fp.read(chunk_size):
                yield chunk

    def artifact_size(self, digest: Digest) -> int:
        try:
            return self._committed_path(digest).stat().st_size
        except FileNotFoundError as e:
            raise NotFound(digest.hex) from e

    # manifests

    def commit_manifest(self, m: Manifest) -> str:
        """Persist a manifest whose every digest is stored; returns its id."""
        try:
            canonical = manifest_canonical_bytes(m)
        except CoverageError as e:
            raise InvalidManifest(str(e)) from e
        missing = [d.hex for d in m.digests() if d not in self._digests]
        if missing:
            raise DanglingDigest(missing)
        manifest_id = hashlib.sha256(canonical).hexdigest()

        with self._commit_lock:
            if manifest_id in self._summaries:
                logger.info("Manifest %s already committed", manifest_id)
                return manifest_id
            path = self.manifest_dir / f"{manifest_id}.json"
            staging = self.tmp_dir / f"{manifest_id}.{uuid.uuid4().hex}.json"
            try:
                staging.write_bytes(canonical)
                os.replace(staging, path)
                self._append(self.manifest_log, manifest_id)
            except OSError as e:
                staging.unlink(missing_ok=True)
                raise StorageError(f"Cannot store manifest {manifest_id}: {e}") from e
            summary = self._index_manifest(manifest_id, m)
            self._index_fuzzy(m)
        logger.info(
            "Committed manifest %s: %d artifacts, %d new digests",
            manifest_id,
            summary.artifact_count,
            summary.new_digests,
        )
        return manifest_id

    def commit_manifest_bytes(self, data: bytes) -> str:
        return self.commit_manifest(manifest_from_bytes(data))

    def _index_manifest(self, manifest_id: str, m: Manifest) -> ManifestSummary:
        new_digests = 0
        for artifact in m.artifacts:
            self._occurrences.setdefault(artifact.digest, []).append(
                OccurrenceRecord(
                    artifact.digest, manifest_id, artifact.label, artifact.first_offset
                )
            )
            self._logical_bytes += artifact.logical_size
            if artifact.digest not in self._referenced:
                self._referenced[artifact.digest] = artifact.logical_size
                self._physical_bytes += artifact.logical_size
                new_digests += 1
        summary = ManifestSummary(
            manifest_id=manifest_id,
            case_id=m.case_id,
            investigator_id=m.investigator_id,
            disk_id=m.disk_id,
            acquired_at=format_timestamp(m.acquired_at),
            artifact_count=len(m.artifacts),
            logical_bytes=m.logical_bytes,
            new_digests=new_digests,
        )
        self._summaries[manifest_id] = summary
        return summary

    def _index_fuzzy(self, m: Manifest) -> None:
        fresh: Dict[Digest, FuzzyDigest] = {}
        for artifact in m.artifacts:
            if artifact.fuzzy is None or self.fuzzy_index.get(artifact.digest):
                continue
            fresh.setdefault(artifact.digest, artifact.fuzzy)
        if fresh:
            self.fuzzy_index.update(fresh)
            self._append(
                self.fuzzy_file, "\n".join(f"{d.hex}\t{f}" for d, f in fresh.items())
            )

    def _manifest_path(self, manifest_id: str) -> Path:
        if not _MANIFEST_ID_RE.match(manifest_id):
            raise NotFound(f"manifest {manifest_id}")
        path = self.manifest_dir / f"{manifest_id.lower()}.json"
        if not path.exists():
            raise NotFound(f"manifest {manifest_id}")
        return path

    def get_manifest_bytes(self, manifest_id: str) -> bytes:
        return self._manifest_path(manifest_id).read_bytes()

    def get_manifest(self, manifest_id: str) -> Manifest:
        data = self.get_manifest_bytes(manifest_id)
        return manifest_from_bytes(data, manifest_id=manifest_id.lower())

    def list_manifests(self) -> List[ManifestSummary]:
        """Summaries in commit order."""
        with self._commit_lock:
            return list(self._summaries.values())

    # queries

    def query_duplicates(self, digest: Digest) -> List[OccurrenceRecord]:
        with self._commit_lock:
            records = list(self._occurrences.get(digest, ()))
        return sorted(records, key=lambda r: (r.manifest_id, r.offset))

    def store_stats(self) -> StoreStats:
        with self._commit_lock:
            return StoreStats(
                unique_artifacts=len(self._referenced),
                logical_bytes=self._logical_bytes,
                physical_bytes=self._physical_bytes,
                manifest_count=len(self._summaries),
            )

    def near_matches(self, fuzzy: FuzzyDigest, threshold: int) -> List[NearMatch]:
        return [
            NearMatch(digest.hex, score)
            for digest, score in near_matches(fuzzy, self.fuzzy_index, threshold)
        ]

    def _recompute_fuzzy(
        self, manifest_ids: Iterable[str], entries: Dict[Digest, FuzzyDigest]
    ) -> None:
        for manifest_id in manifest_ids:
            for artifact in self.get_manifest(manifest_id).artifacts:
                if (
                    artifact.kind is not ArtifactKind.FILE_DATA
                    or artifact.logical_size < FUZZY_MIN_SIZE
                    or artifact.digest in entries
                ):
                    continue
                hasher = FuzzyHasher()
                for chunk in self.read_artifact(artifact.digest):
                    hasher.update(chunk)
                entries[artifact.digest] = hasher.digest()

    def rebuild_fuzzy_index(self) -> int:
        """Recompute fuzzy digests server-side from the blobs of every
        file-data artifact of at least FUZZY_MIN_SIZE bytes."""
        with self._commit_lock:
            seen = list(self._summaries)
        entries: Dict[Digest, FuzzyDigest] = {}
        self._recompute_fuzzy(seen, entries)

        # commits are held off until the new index is in place
        with self._commit_lock:
            done = set(seen)
            late = [m for m in self._summaries if m not in done]
            self._recompute_fuzzy(late, entries)
            staging = self.tmp_dir / f"fuzzy.{uuid.uuid4().hex}.tsv"
            lines = sorted(f"{d.hex}\t{f}\n" for d, f in entries.items())
            with self._log_lock:
                staging.write_text("".join(lines), encoding="ascii")
                os.replace(staging, self.fuzzy_file)
                self.fuzzy_index.replace(entries)
        logger.info("Rebuilt fuzzy index: %d entries", len(entries))
        return len(entries)

    # integrity

    def _blob_files(self) -> Iterator[Path]:
        for fan in sorted(self.blob_dir.iterdir()):
            if fan.is_dir():
                yield from sorted(p for p in fan.iterdir() if p.is_file())

    def audit_store(self) -> AuditReport:
        """Re-hash every blob and check every manifest resolves."""
        report = AuditReport()
        on_disk: Set[Digest] = set()
        for path in self._blob_files():
            report.blobs_checked += 1
            name = path.parent.name + path.name
            try:
                digest = Digest.from_hex(name)
            except ValueError:
                report.violations.append(
                    AuditViolation("unexpected_file", str(path.relative_to(self.root)))
                )
                continue
            if name != digest.hex:
                report.violations.append(
                    AuditViolation("unexpected_file", str(path.relative_to(self.root)))
                )
                continue
            hasher = ContentHasher()
            with open(path, "rb") as fp:
                while chunk := fp.read(READ_CHUNK):
                    hasher.update(chunk)
            actual = hasher.digest()
            if actual != digest:
                report.violations.append(
                    AuditViolation(
                        "corrupt_blob", digest.hex, f"content hashes to {actual.hex}"
                    )
                )
                continue
            on_disk.add(digest)
            if digest not in self._digests:
                report.violations.append(
                    AuditViolation(
                        "unindexed_blob", digest.hex, "missing from digest log"
                    )
                )

        for digest in sorted(self._digests - on_disk):
            if not self.blob_path(digest).exists():
                report.violations.append(
                    AuditViolation("missing_blob", digest.hex, "logged but not on disk")
                )

        referenced: Set[Digest] = set()
        for path in sorted(self.manifest_dir.glob("*.json")):
            report.manifests_checked += 1
            data = path.read_bytes()
            manifest_id = path.stem
            if hashlib.sha256(data).hexdigest() != manifest_id:
                report.violations.append(
                    AuditViolation("manifest_id_mismatch", manifest_id)
                )
            try:
                manifest = manifest_from_bytes(data, manifest_id)
            except InvalidManifest as e:
                report.violations.append(
                    AuditViolation("invalid_manifest", manifest_id, str(e))
                )
                continue
            for digest in manifest.digests():
                referenced.add(digest)
                if digest not in on_disk:
                    report.violations.append(
                        AuditViolation("dangling_digest", manifest_id, digest.hex)
                    )

        report.orphan_blobs = sorted(d.hex for d in on_disk - referenced)
        report.stale_temp_files = sum(1 for p in self.tmp_dir.iterdir() if p.is_file())
        logger.info(
            "Audit: %d blobs, %d manifests, %d violations",
            report.blobs_checked,
            report.manifests_checked,
            len(report.violations),
        )
        return report
