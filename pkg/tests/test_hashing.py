"""Tests for exact and fuzzy hashing."""

import hashlib
import random

import pytest

from src.dedupacq.errors import EmptyInput
from src.dedupacq.models import Digest, FuzzyDigest
from src.dedupacq.tools.hashing import (
    FUZZY_MIN_SIZE,
    FuzzyIndex,
    compatible,
    content_hash,
    fuzzy_hash,
    near_matches,
    similarity,
)


def _text(seed: int, size: int = 40_000) -> bytes:
    rng = random.Random(seed)
    words = [b"evidence", b"sector", b"cluster", b"volume", b"invoice", b"ledger"]
    out = bytearray()
    while len(out) < size:
        out += rng.choice(words) + b" "
    return bytes(out[:size])


_B64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"


def _signature(rng: random.Random, length: int) -> str:
    return "".join(rng.choice(_B64) for _ in range(length))


def _mutate(rng: random.Random, sig: str) -> str:
    chars = list(sig)
    for _ in range(rng.randrange(1, 6)):
        chars[rng.randrange(len(chars))] = rng.choice(_B64)
    return "".join(chars)


class TestContentHash:
    """Test cases for exact digests."""

    def test_matches_sha256(self) -> None:
        """Test the digest is SHA-256 of the bytes."""
        assert content_hash(b"abc").raw == hashlib.sha256(b"abc").digest()

    def test_chunking_irrelevant(self) -> None:
        """Test chunked input hashes like contiguous input."""
        data = _text(1, 10_000)
        chunks = [data[i : i + 333] for i in range(0, len(data), 333)]
        assert content_hash(iter(chunks)) == content_hash(data)

    def test_empty_input(self) -> None:
        """Test empty input has the well-known empty digest."""
        assert content_hash(b"").hex == hashlib.sha256(b"").hexdigest()


class TestFuzzyHash:
    """Test cases for fuzzy digests."""

    def test_empty_input_rejected(self) -> None:
        """Test fuzzy hashing refuses empty input."""
        with pytest.raises(EmptyInput):
            fuzzy_hash(b"")
        with pytest.raises(EmptyInput):
            fuzzy_hash(iter([b"", b""]))

    def test_streaming_matches_one_shot(self) -> None:
        """Test chunked updates give the same fuzzy digest."""
        data = _text(2)
        chunks = [data[i : i + 4096] for i in range(0, len(data), 4096)]
        assert fuzzy_hash(iter(chunks)) == fuzzy_hash(data)

    def test_identical_content_scores_100(self) -> None:
        """Test a digest matches itself perfectly."""
        digest = fuzzy_hash(_text(3))
        assert similarity(digest, digest) == 100

    def test_small_edit_scores_high(self) -> None:
        """Test a lightly edited document stays similar."""
        data = _text(4)
        edited = data[:20_000] + b"REDACTED" + data[20_008:]
        assert similarity(fuzzy_hash(data), fuzzy_hash(edited)) >= 50

    def test_unrelated_content_scores_low(self) -> None:
        """Test random unrelated data scores low."""
        rng = random.Random(5)
        a = bytes(rng.getrandbits(8) for _ in range(FUZZY_MIN_SIZE * 4))
        b = bytes(rng.getrandbits(8) for _ in range(FUZZY_MIN_SIZE * 4))
        assert similarity(fuzzy_hash(a), fuzzy_hash(b)) < 20

    @pytest.mark.parametrize(
        "size", [64 * 1024, pytest.param(1024 * 1024, marks=pytest.mark.slow)]
    )
    def test_random_pairs_score_at_most_5(self, size: int) -> None:
        """Test a hundred pairs of independent random blobs never look alike."""
        rng = random.Random(1000)
        scores = [
            similarity(fuzzy_hash(rng.randbytes(size)), fuzzy_hash(rng.randbytes(size)))
            for _ in range(100)
        ]
        assert max(scores) <= 5

    @pytest.mark.parametrize("trials", [10, pytest.param(100, marks=pytest.mark.slow)])
    def test_kilobyte_edit_keeps_floor(self, trials: int) -> None:
        """Test overwriting 1 KiB in the middle of 1 MiB keeps the score at 60+."""
        rng = random.Random(2000)
        size, middle = 1024 * 1024, 512 * 1024
        for _ in range(trials):
            data = rng.randbytes(size)
            edited = data[:middle] + rng.randbytes(1024) + data[middle + 1024 :]
            assert similarity(fuzzy_hash(data), fuzzy_hash(edited)) >= 60

    def test_similarity_symmetric(self) -> None:
        """Test argument order does not change the score."""
        a, b = fuzzy_hash(_text(6)), fuzzy_hash(_text(6)[:30_000])
        assert similarity(a, b) == similarity(b, a)

    def test_incompatible_block_sizes(self) -> None:
        """Test block sizes more than one step apart never match."""
        a = FuzzyDigest(3, "abc", "abc")
        b = FuzzyDigest(24, "abc", "abc")
        assert not compatible(a, b)
        assert similarity(a, b) == 0
        assert compatible(a, FuzzyDigest(6, "x", "y"))


class TestFuzzyIndex:
    """Test cases for the fuzzy index."""

    def test_near_matches_sorted(self) -> None:
        """Test matches above the threshold come back best first."""
        base = _text(7)
        close = base[:39_000] + b"x" * 1000
        far = _text(8)
        index = FuzzyIndex()
        digests = {}
        for name, data in (("base", base), ("close", close), ("far", far)):
            digests[name] = content_hash(data)
            index.add(digests[name], fuzzy_hash(data))
        matches = near_matches(fuzzy_hash(base), index, 50)
        assert matches[0] == (digests["base"], 100)
        assert digests["far"] not in [d for d, _ in matches]
        scores = [s for _, s in matches]
        assert scores == sorted(scores, reverse=True)

    @pytest.mark.parametrize("threshold", [0, 101, -5])
    def test_threshold_range(self, threshold: int) -> None:
        """Test thresholds outside 1..100 are rejected."""
        with pytest.raises(ValueError):
            near_matches(FuzzyDigest(3, "a", "a"), FuzzyIndex(), threshold)

    def test_get_replace_and_len(self) -> None:
        """Test lookup by content digest and wholesale replacement."""
        one, two = content_hash(b"1"), content_hash(b"2")
        index = FuzzyIndex({one: FuzzyDigest(3, "a", "b")})
        index.update({two: FuzzyDigest(6, "c", "d")})
        assert len(index) == 2
        assert index.get(two) == FuzzyDigest(6, "c", "d")
        index.replace({two: FuzzyDigest(12, "e", "f")})
        assert index.get(one) is None
        assert index.items() == [(two, FuzzyDigest(12, "e", "f"))]

    def test_candidates_only_adjacent_buckets(self) -> None:
        """Test candidates come from equal or neighbouring block sizes."""
        index = FuzzyIndex(
            {
                content_hash(bytes([n])): FuzzyDigest(bs, "a", "a")
                for n, bs in enumerate((3, 6, 12, 24, 48))
            }
        )
        sizes = sorted(f.block_size for _, f in index.candidates(12))
        assert sizes == [6, 12, 24]

    @pytest.mark.parametrize(
        "entries", [1000, pytest.param(10_000, marks=pytest.mark.slow)]
    )
    def test_near_matches_equals_full_scan(self, entries: int) -> None:
        """Test bucketed lookup finds exactly what scoring every entry finds."""
        rng = random.Random(3000)
        index = FuzzyIndex()
        families = []
        for n in range(entries):
            if families and rng.random() < 0.7:
                block_size, sig1, sig2 = rng.choice(families)
                block_size *= rng.choice((1, 1, 2))
                sig1, sig2 = _mutate(rng, sig1), _mutate(rng, sig2)
            else:
                block_size = 3 * 2 ** rng.randrange(12)
                sig1, sig2 = _signature(rng, 64), _signature(rng, 32)
                families.append((block_size, sig1, sig2))
            index.add(Digest(rng.randbytes(32)), FuzzyDigest(block_size, sig1, sig2))

        items = index.items()
        for query in [f for _, f in rng.sample(items, 20)]:
            for threshold in (1, 40, 80):
                scanned = [
                    (digest, similarity(query, fuzzy))
                    for digest, fuzzy in items
                    if similarity(query, fuzzy) >= threshold
                ]
                scanned.sort(key=lambda item: (-item[1], item[0].hex))
                assert near_matches(query, index, threshold) == scanned
