"""Exact content digests and context-triggered piecewise (fuzzy) digests."""

import hashlib
import threading
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import ssdeep

from ..errors import EmptyInput
from ..models.digest import Digest, FuzzyDigest

FUZZY_MIN_SIZE = 4096

Chunks = Union[bytes, bytearray, memoryview, Iterable[bytes]]


def _chunks(data: Chunks) -> Iterable[bytes]:
    if isinstance(data, (bytes, bytearray, memoryview)):
        return (bytes(data),)
    return data


class ContentHasher:
    """Streaming SHA-256."""

    def __init__(self) -> None:
        self._h = hashlib.sha256()
        self.length = 0

    def update(self, chunk: bytes) -> None:
        self._h.update(chunk)
        self.length += len(chunk)

    def digest(self) -> Digest:
        return Digest(self._h.digest())


class FuzzyHasher:
    """Streaming CTPH digest backed by libfuzzy."""

    def __init__(self) -> None:
        self._h = ssdeep.Hash()
        self.length = 0

    def update(self, chunk: bytes) -> None:
        if chunk:
            self._h.update(chunk)
            self.length += len(chunk)

    def digest(self) -> FuzzyDigest:
        if self.length == 0:
            raise EmptyInput("Cannot fuzzy-hash empty input")
        return FuzzyDigest.parse(self._h.digest())


def content_hash(data: Chunks) -> Digest:
    hasher = ContentHasher()
    for chunk in _chunks(data):
        hasher.update(chunk)
    return hasher.digest()


def fuzzy_hash(data: Chunks) -> FuzzyDigest:
    hasher = FuzzyHasher()
    for chunk in _chunks(data):
        hasher.update(chunk)
    return hasher.digest()


def compatible(a: FuzzyDigest, b: FuzzyDigest) -> bool:
    """Block sizes equal or one step apart."""
    return a.block_size in (b.block_size, b.block_size * 2, b.block_size // 2)


def similarity(a: FuzzyDigest, b: FuzzyDigest) -> int:
    """Match score 0..100; symmetric."""
    if not compatible(a, b):
        return 0
    first, second = sorted((str(a), str(b)))
    return int(ssdeep.compare(first, second))


class FuzzyIndex:
    """Fuzzy digests keyed by content digest, bucketed by block size.

    Readers work on an immutable snapshot; writers copy, modify and swap
    under a lock.
    """

    def __init__(self, entries: Optional[Mapping[Digest, FuzzyDigest]] = None):
        self._lock = threading.Lock()
        self._buckets: Dict[int, Dict[Digest, FuzzyDigest]] = {}
        if entries:
            self.replace(entries)

    def add(self, digest: Digest, fuzzy: FuzzyDigest) -> None:
        self.update({digest: fuzzy})

    def update(self, entries: Mapping[Digest, FuzzyDigest]) -> None:
        with self._lock:
            buckets = {bs: dict(items) for bs, items in self._buckets.items()}
            for digest, fuzzy in entries.items():
                buckets.setdefault(fuzzy.block_size, {})[digest] = fuzzy
            self._buckets = buckets

    def replace(self, entries: Mapping[Digest, FuzzyDigest]) -> None:
        buckets: Dict[int, Dict[Digest, FuzzyDigest]] = {}
        for digest, fuzzy in entries.items():
            buckets.setdefault(fuzzy.block_size, {})[digest] = fuzzy
        with self._lock:
            self._buckets = buckets

    def candidates(self, block_size: int) -> List[Tuple[Digest, FuzzyDigest]]:
        buckets = self._buckets
        found: List[Tuple[Digest, FuzzyDigest]] = []
        for bs in {block_size // 2, block_size, block_size * 2}:
            found.extend(buckets.get(bs, {}).items())
        return found

    def items(self) -> List[Tuple[Digest, FuzzyDigest]]:
        buckets = self._buckets
        return [item for bucket in buckets.values() for item in bucket.items()]

    def get(self, digest: Digest) -> Optional[FuzzyDigest]:
        for bucket in self._buckets.values():
            if digest in bucket:
                return bucket[digest]
        return None

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets.values())


def near_matches(
    q: FuzzyDigest, index: FuzzyIndex, threshold: int
) -> List[Tuple[Digest, int]]:
    """Indexed entries scoring at least ``threshold``, best first."""
    if not 1 <= threshold <= 100:
        raise ValueError(f"threshold must be within 1..100, got {threshold}")
    scored = []
    for digest, fuzzy in index.candidates(q.block_size):
        score = similarity(q, fuzzy)
        if score >= threshold:
            scored.append((digest, score))
    scored.sort(key=lambda item: (-item[1], item[0].hex))
    return scored
