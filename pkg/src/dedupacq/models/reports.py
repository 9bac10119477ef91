"""Report and statistics records produced by the services."""

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .digest import Digest


def sorted_histogram(counts: Iterable[Tuple[str, int]]) -> Dict[str, int]:
    """Order by count descending, ties broken by digest hex ascending."""
    return dict(sorted(counts, key=lambda item: (-item[1], item[0])))


def duplicate_histogram(digests: Iterable[Digest]) -> Dict[str, int]:
    """Occurrence counts of every digest seen more than once."""
    counter = Counter(d.hex for d in digests)
    return sorted_histogram((h, n) for h, n in counter.items() if n > 1)


@dataclass(frozen=True)
class OccurrenceRecord:
    digest: Digest
    manifest_id: str
    label: str
    offset: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "digest": self.digest.hex,
            "manifest_id": self.manifest_id,
            "label": self.label,
            "offset": self.offset,
        }


@dataclass(frozen=True)
class StoreStats:
    unique_artifacts: int = 0
    logical_bytes: int = 0
    physical_bytes: int = 0
    manifest_count: int = 0

    @property
    def dedup_ratio(self) -> float:
        if self.logical_bytes == 0:
            return 0.0
        return 1.0 - self.physical_bytes / self.logical_bytes

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "dedup_ratio": self.dedup_ratio}


@dataclass(frozen=True)
class AuditViolation:
    kind: str
    subject: str
    detail: str = ""


@dataclass
class AuditReport:
    blobs_checked: int = 0
    manifests_checked: int = 0
    violations: List[AuditViolation] = field(default_factory=list)
    orphan_blobs: List[str] = field(default_factory=list)
    stale_temp_files: int = 0

    @property
    def clean(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "clean": self.clean,
            "blobs_checked": self.blobs_checked,
            "manifests_checked": self.manifests_checked,
            "violations": [asdict(v) for v in self.violations],
            "orphan_blobs": list(self.orphan_blobs),
            "stale_temp_files": self.stale_temp_files,
        }


@dataclass(frozen=True)
class ManifestSummary:
    manifest_id: str
    case_id: str
    investigator_id: str
    disk_id: str
    acquired_at: str
    artifact_count: int
    logical_bytes: int
    new_digests: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class PhaseTimings:
    """Wall-clock seconds per pipeline stage. Stages overlap, so the sum can
    exceed the total wall time."""

    enumerate: float = 0.0
    hash: float = 0.0
    check: float = 0.0
    upload: float = 0.0
    commit: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {k: round(v, 6) for k, v in asdict(self).items()}


@dataclass
class AcquisitionReport:
    manifest_id: str
    image_path: str
    image_size: int
    image_digest: str
    artifact_count: int
    duplicate_count: int
    unique_uploaded_count: int
    intra_image_duplicates: int
    store_duplicates: int
    file_artifacts: int
    file_duplicates: int
    bytes_read: int
    metadata_bytes_read: int
    spilled_bytes: int
    payload_bytes_transferred: int
    wall_time: float
    timings: PhaseTimings = field(default_factory=PhaseTimings)
    histogram: Dict[str, int] = field(default_factory=dict)

    @property
    def duplicate_ratio(self) -> float:
        if self.artifact_count == 0:
            return 0.0
        return self.duplicate_count / self.artifact_count

    @property
    def file_duplicate_ratio(self) -> float:
        if self.file_artifacts == 0:
            return 0.0
        return self.file_duplicates / self.file_artifacts

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["timings"] = self.timings.to_dict()
        data["duplicate_ratio"] = self.duplicate_ratio
        data["file_duplicate_ratio"] = self.file_duplicate_ratio
        return data


@dataclass(frozen=True)
class InventoryRow:
    kind: str
    offset: int
    size: int
    extent_count: int
    digest: str
    label: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class InspectionReport:
    image_path: str
    image_size: int
    image_digest: str
    rows: List[InventoryRow]
    kind_counts: Dict[str, int]
    histogram: Dict[str, int]
    bytes_read: int
    wall_time: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_path": self.image_path,
            "image_size": self.image_size,
            "image_digest": self.image_digest,
            "artifacts": [r.to_dict() for r in self.rows],
            "kind_counts": dict(self.kind_counts),
            "histogram": dict(self.histogram),
            "bytes_read": self.bytes_read,
            "wall_time": self.wall_time,
        }


@dataclass
class BenchmarkRun:
    repetition: int
    initial: AcquisitionReport
    second: AcquisitionReport

    def to_dict(self) -> Dict[str, Any]:
        return {
            "repetition": self.repetition,
            "initial": self.initial.to_dict(),
            "second": self.second.to_dict(),
        }


@dataclass
class BenchmarkReport:
    image_path: str
    mode: str
    link_mbit: Optional[float]
    runs: List[BenchmarkRun] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_path": self.image_path,
            "mode": self.mode,
            "link_mbit": self.link_mbit,
            "runs": [r.to_dict() for r in self.runs],
        }


@dataclass
class ReconstructionReport:
    manifest_id: str
    output_path: str
    bytes_written: int
    artifacts_placed: int
    expected_digest: str
    computed_digest: str
    sparse: bool
    wall_time: float

    @property
    def passed(self) -> bool:
        return self.expected_digest == self.computed_digest

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "verification": "pass" if self.passed else "fail"}


@dataclass
class VerificationResult:
    image_path: str
    manifest_id: Optional[str]
    expected_size: int
    actual_size: int
    expected_digest: str
    computed_digest: Optional[str]
    sampled: int = 0
    corrupt_artifacts: List[str] = field(default_factory=list)

    @property
    def size_ok(self) -> bool:
        return self.expected_size == self.actual_size

    @property
    def digest_ok(self) -> bool:
        return self.computed_digest == self.expected_digest

    @property
    def passed(self) -> bool:
        return self.size_ok and self.digest_ok and not self.corrupt_artifacts

    def to_dict(self) -> Dict[str, Any]:
        return {
            **asdict(self),
            "size_ok": self.size_ok,
            "digest_ok": self.digest_ok,
            "passed": self.passed,
        }


@dataclass(frozen=True)
class Placement:
    label: str
    kind: str
    offset: int


@dataclass
class ExtractionResult:
    manifest_id: str
    selector: str
    output_path: str
    bytes_written: int
    digest: str
    placements: List[Placement] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class NearMatch:
    digest: str
    score: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class DuplicateReport:
    """Every occurrence of one digest across committed manifests."""

    digest: str
    occurrences: List[OccurrenceRecord] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "digest": self.digest,
            "count": len(self.occurrences),
            "occurrences": [o.to_dict() for o in self.occurrences],
        }


@dataclass
class ManifestListing:
    manifests: List[ManifestSummary] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"manifests": [m.to_dict() for m in self.manifests]}


@dataclass
class NearMatchReport:
    query: str
    threshold: int
    matches: List[NearMatch] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "query": self.query,
            "threshold": self.threshold,
            "matches": [m.to_dict() for m in self.matches],
        }


@dataclass(frozen=True)
class ReindexReport:
    entries: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
