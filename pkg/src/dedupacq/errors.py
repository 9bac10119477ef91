"""Exception hierarchy for dedup-acq."""

from typing import Iterable, List, Optional, Sequence


class DedupAcqError(Exception):
    """Base class for all dedup-acq errors."""


class ConfigError(DedupAcqError):
    """Invalid configuration or command usage."""


# Image model and parsing


class ImageError(DedupAcqError):
    """Problem with an image or its structures."""


class ExtentOutOfBounds(ImageError):
    def __init__(self, offset: int, length: int, image_size: int):
        self.offset = offset
        self.length = length
        self.image_size = image_size
        super().__init__(
            f"Extent ({offset}, {length}) exceeds image size {image_size}"
        )


class NotAnMbr(ImageError):
    """Sector 0 carries no MBR boot signature."""


class CorruptPartitionTable(ImageError):
    """Partition entries overlap, start at sector 0 or leave the image."""


class CorruptBootSector(ImageError):
    def __init__(self, field_name: str, value: object, reason: str = "invalid"):
        self.field_name = field_name
        self.value = value
        super().__init__(f"Corrupt boot sector: {field_name}={value!r} ({reason})")


class CorruptVolume(ImageError):
    """A volume region (FAT, root directory) is truncated or unreadable."""


class UnsupportedVariant(ImageError):
    def __init__(self, variant: str):
        self.variant = variant
        super().__init__(f"Unsupported FAT variant: {variant}")


class NoFatVolume(ImageError):
    """The partition table lists no FAT16/FAT32 partition."""


class CorruptChain(ImageError):
    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"Corrupt cluster chain for {path}: {reason}")


class TruncatedFile(ImageError):
    def __init__(self, path: str, size: int, chain_bytes: int):
        self.path = path
        self.size = size
        self.chain_bytes = chain_bytes
        super().__init__(
            f"{path}: size {size} exceeds its cluster chain ({chain_bytes} bytes)"
        )


class CoverageError(ImageError):
    """Artifact extents do not tile the image exactly."""

    def __init__(self, message: str, report: Optional[object] = None):
        self.report = report
        super().__init__(message)


# Fixtures


class FixtureError(DedupAcqError):
    """Invalid fixture description."""


class CapacityError(FixtureError):
    """Fixture content does not fit the volume."""


# Hashing


class HashingError(DedupAcqError):
    pass


class EmptyInput(HashingError):
    """Fuzzy hashing needs at least one byte."""


# Evidence store


class StoreError(DedupAcqError):
    """Evidence store failure."""


class BatchTooLarge(StoreError):
    def __init__(self, size: int, limit: int):
        self.size = size
        self.limit = limit
        super().__init__(f"Batch of {size} digests exceeds limit {limit}")


class DigestMismatch(StoreError):
    def __init__(self, claimed: str, actual: str):
        self.claimed = claimed
        self.actual = actual
        super().__init__(f"Digest mismatch: claimed {claimed}, computed {actual}")


class NotFound(StoreError):
    def __init__(self, what: str):
        self.what = what
        super().__init__(f"Not found: {what}")


class DanglingDigest(StoreError):
    def __init__(self, missing: Iterable[str], unlisted: int = 0):
        self.missing: List[str] = sorted(set(missing))
        # digests known to be missing but not named, e.g. cut from an ERROR frame
        self.unlisted = unlisted
        total = len(self.missing) + unlisted
        preview = ", ".join(self.missing[:5])
        more = f" (+{total - 5} more)" if total > 5 else ""
        super().__init__(f"Unresolved digests: {preview}{more}")


class InvalidManifest(StoreError):
    """Manifest fails structural or coverage validation."""


class StorageError(StoreError):
    """Underlying filesystem failure (disk full, permissions)."""


# Wire protocol


class ProtocolError(DedupAcqError):
    """Malformed frame or message sequence."""


class FrameTooShort(ProtocolError):
    pass


class FrameTooLarge(ProtocolError):
    def __init__(self, length: int, limit: int):
        self.length = length
        self.limit = limit
        super().__init__(f"Frame body of {length} bytes exceeds limit {limit}")


class UnsupportedVersion(ProtocolError):
    def __init__(self, version: int):
        self.version = version
        super().__init__(f"Unsupported protocol version {version}")


class Unreachable(ProtocolError):
    """Endpoint did not answer within the retry budget."""


class RemoteError(ProtocolError):
    def __init__(self, code: int, text: str):
        self.code = code
        self.text = text
        super().__init__(f"Server error {code}: {text}")


# Acquisition and reconstruction


class AcquisitionError(DedupAcqError):
    pass


class ResumableFailure(AcquisitionError):
    """Acquisition stopped after partial uploads; no manifest was committed."""

    def __init__(self, uploaded: int, cause: BaseException):
        self.uploaded = uploaded
        self.cause = cause
        super().__init__(f"Acquisition interrupted after {uploaded} uploads: {cause}")


class ReconstructionError(DedupAcqError):
    pass


class VerificationFailed(ReconstructionError):
    def __init__(self, expected: str, computed: str, detail: str = ""):
        self.expected = expected
        self.computed = computed
        suffix = f" ({detail})" if detail else ""
        super().__init__(
            f"Verification failed: expected {expected}, computed {computed}{suffix}"
        )


class Ambiguous(ReconstructionError):
    def __init__(self, selector: str, candidates: Sequence[str]):
        self.selector = selector
        self.candidates = list(candidates)
        super().__init__(
            f"Selector {selector!r} matches {len(self.candidates)} artifacts: "
            + ", ".join(self.candidates)
        )
