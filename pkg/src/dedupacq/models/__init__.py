"""Data models for dedup-acq."""

from .digest import Digest, FuzzyDigest
from .image import (
    Artifact,
    ArtifactKind,
    CoverageReport,
    Extent,
    ExtentList,
    Manifest,
    coverage_check,
    extent_bytes,
    find_artifacts,
    manifest_canonical_bytes,
    manifest_from_bytes,
    manifest_id_of,
)
from .reports import (
    AcquisitionReport,
    AuditReport,
    AuditViolation,
    BenchmarkReport,
    BenchmarkRun,
    DuplicateReport,
    ExtractionResult,
    InspectionReport,
    InventoryRow,
    ManifestListing,
    ManifestSummary,
    NearMatch,
    NearMatchReport,
    OccurrenceRecord,
    PhaseTimings,
    Placement,
    ReconstructionReport,
    ReindexReport,
    StoreStats,
    VerificationResult,
)
from .source import ByteSource, BytesSource, ImageSource

__all__ = [
    "AcquisitionReport",
    "Artifact",
    "ArtifactKind",
    "AuditReport",
    "AuditViolation",
    "BenchmarkReport",
    "BenchmarkRun",
    "ByteSource",
    "BytesSource",
    "CoverageReport",
    "Digest",
    "DuplicateReport",
    "Extent",
    "ExtentList",
    "ExtractionResult",
    "FuzzyDigest",
    "ImageSource",
    "InspectionReport",
    "InventoryRow",
    "Manifest",
    "ManifestListing",
    "ManifestSummary",
    "NearMatch",
    "NearMatchReport",
    "OccurrenceRecord",
    "PhaseTimings",
    "Placement",
    "ReconstructionReport",
    "ReindexReport",
    "StoreStats",
    "VerificationResult",
    "coverage_check",
    "extent_bytes",
    "find_artifacts",
    "manifest_canonical_bytes",
    "manifest_from_bytes",
    "manifest_id_of",
]
