"""Core image model: extents, artifacts, manifests and the coverage map."""

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from ..errors import CoverageError, ExtentOutOfBounds, InvalidManifest
from .digest import Digest, FuzzyDigest
from .source import ByteSource

MANIFEST_FORMAT = 1
READ_CHUNK = 1024 * 1024
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


@dataclass(frozen=True, order=True)
class Extent:
    """A byte range ``[offset, offset + length)`` of an image."""

    offset: int
    length: int

    def __post_init__(self) -> None:
        if self.offset < 0:
            raise ValueError(f"Extent offset must be >= 0, got {self.offset}")
        if self.length <= 0:
            raise ValueError(f"Extent length must be > 0, got {self.length}")

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class ExtentList:
    """Ordered, non-overlapping extents locating an artifact's bytes."""

    extents: Tuple[Extent, ...]

    def __post_init__(self) -> None:
        if not self.extents:
            raise ValueError("ExtentList must not be empty")
        for prev, cur in zip(self.extents, self.extents[1:]):
            if cur.offset < prev.end:
                raise ValueError(
                    f"Extents out of order or overlapping: {prev} then {cur}"
                )

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[int, int]]) -> "ExtentList":
        return cls(tuple(Extent(o, n) for o, n in pairs))

    @classmethod
    def coalesced(cls, pairs: Iterable[Tuple[int, int]]) -> "ExtentList":
        """Build from pairs in order, merging each pair that starts where the
        previous one ends."""
        merged: List[List[int]] = []
        for offset, length in pairs:
            if merged and merged[-1][0] + merged[-1][1] == offset:
                merged[-1][1] += length
            else:
                merged.append([offset, length])
        return cls.from_pairs((o, n) for o, n in merged)

    @property
    def total_length(self) -> int:
        return sum(e.length for e in self.extents)

    @property
    def first_offset(self) -> int:
        return self.extents[0].offset

    def pairs(self) -> List[Tuple[int, int]]:
        return [(e.offset, e.length) for e in self.extents]

    def split(self, max_size: int) -> List["ExtentList"]:
        """Cut the logical byte stream into consecutive pieces of at most
        ``max_size`` bytes."""
        pieces: List[ExtentList] = []
        current: List[Tuple[int, int]] = []
        room = max_size
        for ext in self.extents:
            offset, remaining = ext.offset, ext.length
            while remaining:
                take = min(room, remaining)
                current.append((offset, take))
                offset += take
                remaining -= take
                room -= take
                if room == 0:
                    pieces.append(ExtentList.from_pairs(current))
                    current, room = [], max_size
        if current:
            pieces.append(ExtentList.from_pairs(current))
        return pieces

    def __iter__(self) -> Iterator[Extent]:
        return iter(self.extents)

    def __len__(self) -> int:
        return len(self.extents)


class ArtifactKind(str, Enum):
    FILE_DATA = "file_data"
    FILE_SLACK = "file_slack"
    UNALLOCATED = "unallocated"
    FS_METADATA = "fs_metadata"
    INTER_PARTITION_GAP = "inter_partition_gap"


def _utc_seconds(value: Optional[datetime]) -> Optional[datetime]:
    if value is None:
        return None
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(value: datetime) -> str:
    return value.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class Artifact:
    """A hashed byte region of an image: the unit of deduplication."""

    kind: ArtifactKind
    extents: ExtentList
    digest: Digest
    fuzzy: Optional[FuzzyDigest] = None
    path: Optional[str] = None
    created: Optional[datetime] = None
    modified: Optional[datetime] = None
    part: Optional[int] = None

    def __post_init__(self) -> None:
        if (self.path is not None) != (self.kind is ArtifactKind.FILE_DATA):
            raise ValueError("path is required for file data and only for it")
        object.__setattr__(self, "created", _utc_seconds(self.created))
        object.__setattr__(self, "modified", _utc_seconds(self.modified))

    @property
    def logical_size(self) -> int:
        return self.extents.total_length

    @property
    def first_offset(self) -> int:
        return self.extents.first_offset

    @property
    def label(self) -> str:
        """Path for file data, kind name otherwise."""
        return self.path if self.path is not None else self.kind.value


@dataclass(frozen=True)
class Manifest:
    """Complete metadata of one acquisition.

    Artifacts are kept in canonical order (by first extent offset). The
    ``manifest_id`` is assigned by the store and is not part of equality.
    """

    case_id: str
    investigator_id: str
    disk_id: str
    acquired_at: datetime
    image_size: int
    image_digest: Digest
    artifacts: Tuple[Artifact, ...]
    manifest_id: Optional[str] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "acquired_at", _utc_seconds(self.acquired_at))
        object.__setattr__(
            self,
            "artifacts",
            tuple(sorted(self.artifacts, key=lambda a: a.first_offset)),
        )

    @property
    def logical_bytes(self) -> int:
        return sum(a.logical_size for a in self.artifacts)

    def digests(self) -> List[Digest]:
        """Distinct digests in first-occurrence order."""
        seen: Dict[Digest, None] = {}
        for artifact in self.artifacts:
            seen.setdefault(artifact.digest, None)
        return list(seen)


@dataclass(frozen=True)
class CoverageReport:
    """Result of checking that extents tile ``[0, image_size)``."""

    image_size: int
    gaps: Tuple[Tuple[int, int], ...] = ()
    overlaps: Tuple[Tuple[int, int], ...] = ()

    @property
    def ok(self) -> bool:
        return not self.gaps and not self.overlaps

    def describe(self) -> str:
        if self.ok:
            return "coverage ok"
        parts = [f"gap at ({o}, {n})" for o, n in self.gaps[:5]]
        parts += [f"overlap at ({o}, {n})" for o, n in self.overlaps[:5]]
        return "; ".join(parts)


def coverage_check(artifacts: Iterable[Any], image_size: int) -> CoverageReport:
    """Check that the extents of ``artifacts`` partition the image exactly.

    Accepts anything with an ``extents`` attribute. Bytes claimed beyond
    ``image_size`` are reported as an overlap with the end of the image.
    """
    extents = sorted(ext for a in artifacts for ext in a.extents)
    gaps: List[Tuple[int, int]] = []
    overlaps: List[Tuple[int, int]] = []
    cursor = 0
    for ext in extents:
        if ext.offset > cursor:
            gaps.append((cursor, ext.offset - cursor))
        elif ext.offset < cursor:
            overlaps.append((ext.offset, min(cursor, ext.end) - ext.offset))
        cursor = max(cursor, ext.end)
    if cursor < image_size:
        gaps.append((cursor, image_size - cursor))
    elif cursor > image_size:
        overlaps.append((image_size, cursor - image_size))
    return CoverageReport(image_size, tuple(gaps), tuple(overlaps))


def extent_bytes(
    image: ByteSource, extents: ExtentList, chunk_size: int = READ_CHUNK
) -> Iterator[bytes]:
    """Yield the image bytes of each extent in list order, in chunks."""
    for ext in extents:
        if ext.end > image.size:
            raise ExtentOutOfBounds(ext.offset, ext.length, image.size)
    for ext in extents:
        offset, remaining = ext.offset, ext.length
        while remaining:
            take = min(chunk_size, remaining)
            yield image.read_at(offset, take)
            offset += take
            remaining -= take


def _artifact_to_dict(artifact: Artifact) -> Dict[str, Any]:
    return {
        "kind": artifact.kind.value,
        "extents": [[e.offset, e.length] for e in artifact.extents],
        "digest": artifact.digest.hex,
        "fuzzy": str(artifact.fuzzy) if artifact.fuzzy else None,
        "path": artifact.path,
        "created": format_timestamp(artifact.created) if artifact.created else None,
        "modified": (
            format_timestamp(artifact.modified) if artifact.modified else None
        ),
        "part": artifact.part,
    }


def _artifact_from_dict(data: Dict[str, Any]) -> Artifact:
    return Artifact(
        kind=ArtifactKind(data["kind"]),
        extents=ExtentList.from_pairs((int(o), int(n)) for o, n in data["extents"]),
        digest=Digest.from_hex(data["digest"]),
        fuzzy=FuzzyDigest.parse(data["fuzzy"]) if data.get("fuzzy") else None,
        path=data.get("path"),
        created=parse_timestamp(data["created"]) if data.get("created") else None,
        modified=parse_timestamp(data["modified"]) if data.get("modified") else None,
        part=data.get("part"),
    )


def manifest_to_dict(m: Manifest) -> Dict[str, Any]:
    return {
        "format": MANIFEST_FORMAT,
        "case_id": m.case_id,
        "investigator_id": m.investigator_id,
        "disk_id": m.disk_id,
        "acquired_at": format_timestamp(m.acquired_at),
        "image_size": m.image_size,
        "image_digest": m.image_digest.hex,
        "artifacts": [_artifact_to_dict(a) for a in m.artifacts],
    }


def manifest_canonical_bytes(m: Manifest) -> bytes:
    """Deterministic UTF-8 JSON: sorted keys, no insignificant whitespace."""
    report = coverage_check(m.artifacts, m.image_size)
    if not report.ok:
        raise CoverageError(
            f"Manifest does not cover the image: {report.describe()}", report
        )
    return json.dumps(
        manifest_to_dict(m),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    ).encode("utf-8")


def manifest_id_of(m: Manifest) -> str:
    return hashlib.sha256(manifest_canonical_bytes(m)).hexdigest()


def manifest_from_bytes(data: bytes, manifest_id: Optional[str] = None) -> Manifest:
    """Parse canonical manifest bytes, validating structure and coverage."""
    try:
        doc = json.loads(data.decode("utf-8"))
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"unsupported manifest format {doc.get('format')!r}")
        manifest = Manifest(
            case_id=str(doc["case_id"]),
            investigator_id=str(doc["investigator_id"]),
            disk_id=str(doc["disk_id"]),
            acquired_at=parse_timestamp(doc["acquired_at"]),
            image_size=int(doc["image_size"]),
            image_digest=Digest.from_hex(doc["image_digest"]),
            artifacts=tuple(_artifact_from_dict(a) for a in doc["artifacts"]),
            manifest_id=manifest_id,
        )
    except (UnicodeDecodeError, KeyError, TypeError, ValueError, AttributeError) as e:
        raise InvalidManifest(f"Malformed manifest: {e}") from e
    report = coverage_check(manifest.artifacts, manifest.image_size)
    if not report.ok:
        raise InvalidManifest(f"Manifest coverage failure: {report.describe()}")
    return manifest


def find_artifacts(
    m: Manifest, path: Optional[str] = None, digest: Optional[Digest] = None
) -> Sequence[Artifact]:
    return [
        a
        for a in m.artifacts
        if (path is None or a.path == path) and (digest is None or a.digest == digest)
    ]
