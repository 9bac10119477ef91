"""Rebuild byte-identical images from a manifest and the store, and verify them."""

import logging
import os
import random
import time
import uuid
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Deque, Iterator, List, Optional, Sequence, Tuple, Union

from ..errors import (
    Ambiguous,
    ConfigError,
    DanglingDigest,
    ExtentOutOfBounds,
    NotFound,
    VerificationFailed,
)
from ..models import (
    Artifact,
    ArtifactKind,
    Digest,
    ExtractionResult,
    ImageSource,
    Manifest,
    Placement,
    ReconstructionReport,
    VerificationResult,
    extent_bytes,
)
from ..models.image import READ_CHUNK
from ..tools.hashing import ContentHasher, content_hash
from .remote import StoreBackend

logger = logging.getLogger(__name__)

DEFAULT_FETCH_CONNECTIONS = 4
ZERO_CHUNK = bytes(READ_CHUNK)

PlacementOrder = Callable[[Sequence[Artifact]], Sequence[Artifact]]


@dataclass
class ReconstructionConfig:
    fetch_connections: int = DEFAULT_FETCH_CONNECTIONS
    sparse: bool = True
    placement_order: Optional[PlacementOrder] = None

    def __post_init__(self) -> None:
        if self.fetch_connections < 1:
            raise ConfigError("fetch_connections must be >= 1")


def _staging_path(out_path: Path) -> Path:
    return out_path.with_name(f".{out_path.name}.{uuid.uuid4().hex}.partial")


def _stage_blank(fd: int, size: int, sparse: bool) -> bool:
    """Size the staging file to ``size`` zero bytes; returns whether it is sparse."""
    if sparse:
        try:
            os.ftruncate(fd, size)
            return True
        except OSError as e:
            logger.warning("Sparse staging unavailable (%s); writing zeros", e)
    offset = 0
    while offset < size:
        n = min(len(ZERO_CHUNK), size - offset)
        offset += os.pwrite(fd, ZERO_CHUNK[:n], offset)
    return False


def _file_digest(path: Path) -> Tuple[Digest, int]:
    hasher = ContentHasher()
    with open(path, "rb") as fp:
        while chunk := fp.read(READ_CHUNK):
            hasher.update(chunk)
    return hasher.digest(), hasher.length


def _require_present(store: StoreBackend, digests: List[Digest]) -> None:
    missing: List[str] = []
    step = store.max_check_batch
    for start in range(0, len(digests), step):
        batch = digests[start : start + step]
        flags = store.has_digests(batch)
        missing.extend(d.hex for d, ok in zip(batch, flags) if not ok)
    if missing:
        raise DanglingDigest(missing)


def _fetch(store: StoreBackend, artifact: Artifact) -> bytes:
    """Artifact bytes from the store, re-hashed before use."""
    try:
        data = store.get_artifact(artifact.digest)
    except NotFound as e:
        raise DanglingDigest([artifact.digest.hex]) from e
    actual = content_hash(data)
    if actual != artifact.digest or len(data) != artifact.logical_size:
        raise VerificationFailed(
            artifact.digest.hex,
            actual.hex,
            f"{artifact.label} at offset {artifact.first_offset}",
        )
    return data


def _fetched(
    store: StoreBackend, artifacts: Sequence[Artifact], connections: int
) -> Iterator[Tuple[Artifact, bytes]]:
    """Fetch in parallel, yielding in the given order with a bounded window."""
    window: Deque[Tuple[Artifact, "Future[bytes]"]] = deque()
    with ThreadPoolExecutor(
        max_workers=connections, thread_name_prefix="fetch"
    ) as pool:
        pending = iter(artifacts)
        for artifact in pending:
            window.append((artifact, pool.submit(_fetch, store, artifact)))
            if len(window) >= connections * 2:
                break
        while window:
            artifact, future = window.popleft()
            data = future.result()
            nxt = next(pending, None)
            if nxt is not None:
                window.append((nxt, pool.submit(_fetch, store, nxt)))
            yield artifact, data


def _place(fd: int, artifact: Artifact, data: bytes) -> int:
    view = memoryview(data)
    pos = 0
    for ext in artifact.extents:
        chunk = view[pos : pos + ext.length]
        written = 0
        while written < ext.length:
            written += os.pwrite(fd, chunk[written:], ext.offset + written)
        pos += ext.length
    return pos


def reconstruct(
    manifest_id: str,
    out_path: Union[str, Path],
    store: StoreBackend,
    config: Optional[ReconstructionConfig] = None,
) -> ReconstructionReport:
    """Rebuild the image of ``manifest_id`` at ``out_path``.

    The image is staged under a temporary name next to ``out_path`` and
    renamed into place only after its whole-image digest matched the
    manifest; on any failure no file is left at ``out_path``.
    """
    config = config or ReconstructionConfig()
    started = time.perf_counter()
    manifest = store.get_manifest(manifest_id)
    _require_present(store, manifest.digests())

    out_path = Path(out_path)
    staging = _staging_path(out_path)
    order = (
        list(config.placement_order(manifest.artifacts))
        if config.placement_order
        else list(manifest.artifacts)
    )
    logger.info(
        "Reconstructing %s: %d artifacts, %d bytes",
        manifest_id,
        len(order),
        manifest.image_size,
    )
    bytes_written = 0
    try:
        fd = os.open(staging, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
        try:
            sparse = _stage_blank(fd, manifest.image_size, config.sparse)
            for artifact, data in _fetched(store, order, config.fetch_connections):
                bytes_written += _place(fd, artifact, data)
            os.fsync(fd)
        finally:
            os.close(fd)

        computed, length = _file_digest(staging)
        if computed != manifest.image_digest or length != manifest.image_size:
            raise VerificationFailed(
                manifest.image_digest.hex,
                computed.hex,
                f"reconstructed {length} of {manifest.image_size} bytes",
            )
        os.replace(staging, out_path)
    finally:
        staging.unlink(missing_ok=True)

    logger.info("Reconstruction of %s verified: %s", manifest_id, computed)
    return ReconstructionReport(
        manifest_id=manifest.manifest_id or manifest_id,
        output_path=str(out_path),
        bytes_written=bytes_written,
        artifacts_placed=len(order),
        expected_digest=manifest.image_digest.hex,
        computed_digest=computed.hex,
        sparse=sparse,
        wall_time=time.perf_counter() - started,
    )


def verify_image(
    image_path: Union[str, Path],
    manifest: Manifest,
    sample: int = 0,
    seed: Optional[int] = None,
) -> VerificationResult:
    """Check size, whole-image digest and optionally ``sample`` artifacts.

    Never raises for a bad image; every finding is in the result.
    """
    image_path = Path(image_path)
    result = VerificationResult(
        image_path=str(image_path),
        manifest_id=manifest.manifest_id,
        expected_size=manifest.image_size,
        actual_size=0,
        expected_digest=manifest.image_digest.hex,
        computed_digest=None,
    )
    if not image_path.is_file():
        logger.warning("%s does not exist", image_path)
        return result

    digest, result.actual_size = _file_digest(image_path)
    result.computed_digest = digest.hex

    if sample > 0:
        rng = random.Random(seed)
        chosen = rng.sample(manifest.artifacts, min(sample, len(manifest.artifacts)))
        result.sampled = len(chosen)
        with ImageSource(image_path) as image:
            for artifact in sorted(chosen, key=lambda a: a.first_offset):
                try:
                    actual = content_hash(extent_bytes(image, artifact.extents))
                except ExtentOutOfBounds:
                    actual = None
                if actual != artifact.digest:
                    result.corrupt_artifacts.append(
                        f"{artifact.label}@{artifact.first_offset}"
                    )
    logger.info(
        "Verified %s: size %s, digest %s, %d/%d sampled artifacts corrupt",
        image_path,
        "ok" if result.size_ok else "MISMATCH",
        "ok" if result.digest_ok else "MISMATCH",
        len(result.corrupt_artifacts),
        result.sampled,
    )
    return result


def _select(
    manifest: Manifest, path: Optional[str], digest: Optional[Digest]
) -> Tuple[str, List[Artifact], List[Artifact]]:
    """(selector, pieces to write in order, every placement of that content)."""
    if (path is None) == (digest is None):
        raise ConfigError("Select an artifact by exactly one of path or digest")
    if digest is not None:
        matches = [a for a in manifest.artifacts if a.digest == digest]
        if not matches:
            raise NotFound(digest.hex)
        return digest.hex, matches[:1], matches

    matches = [
        a
        for a in manifest.artifacts
        if a.kind is ArtifactKind.FILE_DATA and a.path == path
    ]
    if not matches:
        raise NotFound(str(path))
    heads = [a for a in matches if not a.part]
    if len(heads) > 1:
        raise Ambiguous(str(path), [f"{a.label}@{a.first_offset}" for a in heads])
    pieces = sorted(matches, key=lambda a: a.part or 0)
    return str(path), pieces, pieces


def extract_artifact(
    manifest: Manifest,
    out_path: Union[str, Path],
    store: StoreBackend,
    path: Optional[str] = None,
    digest: Optional[Digest] = None,
) -> ExtractionResult:
    """Write the content of one artifact (all pieces of a split file) to a file."""
    selector, pieces, placements = _select(manifest, path, digest)
    out_path = Path(out_path)
    staging = _staging_path(out_path)
    hasher = ContentHasher()
    try:
        with open(staging, "wb") as fp:
            for artifact in pieces:
                data = _fetch(store, artifact)
                hasher.update(data)
                fp.write(data)
        os.replace(staging, out_path)
    finally:
        staging.unlink(missing_ok=True)
    logger.info("Extracted %s (%d bytes) to %s", selector, hasher.length, out_path)
    return ExtractionResult(
        manifest_id=manifest.manifest_id or "",
        selector=selector,
        output_path=str(out_path),
        bytes_written=hasher.length,
        digest=hasher.digest().hex,
        placements=[
            Placement(a.label, a.kind.value, a.first_offset) for a in placements
        ],
    )
