"""Digest value types shared by hashing, models and the store."""

import re
from dataclasses import dataclass

DIGEST_SIZE = 32

_HEX_RE = re.compile(r"^[0-9a-fA-F]{64}$")
_B64_ALPHABET = set(
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"
)


@dataclass(frozen=True, order=True)
class Digest:
    """A 256-bit content digest."""

    raw: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.raw, bytes) or len(self.raw) != DIGEST_SIZE:
            raise ValueError(f"Digest must be {DIGEST_SIZE} bytes")

    @property
    def hex(self) -> str:
        return self.raw.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        """Parse 64 hex characters (either case)."""
        if not _HEX_RE.match(text):
            raise ValueError(f"Not a 64-character hex digest: {text!r}")
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.hex

    def __repr__(self) -> str:
        return f"Digest({self.hex[:16]}...)"


@dataclass(frozen=True)
class FuzzyDigest:
    """Context-triggered piecewise digest, text form ``block_size:sig1:sig2``."""

    block_size: int
    sig1: str
    sig2: str

    def __post_init__(self) -> None:
        if self.block_size < 3:
            raise ValueError(f"Invalid fuzzy block size {self.block_size}")
        for sig in (self.sig1, self.sig2):
            if len(sig) > 64 or not set(sig) <= _B64_ALPHABET:
                raise ValueError(f"Invalid fuzzy signature {sig!r}")

    @classmethod
    def parse(cls, text: str) -> "FuzzyDigest":
        parts = text.strip().split(":")
        if len(parts) != 3 or not parts[0].isdigit():
            raise ValueError(f"Not a fuzzy digest: {text!r}")
        return cls(int(parts[0]), parts[1], parts[2])

    def __str__(self) -> str:
        return f"{self.block_size}:{self.sig1}:{self.sig2}"
