"""Shared fixtures: small FAT images with known contents and hand-built manifests."""

import random
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

import pytest

from src.dedupacq.models import Artifact, ArtifactKind, ExtentList, Manifest
from src.dedupacq.services import EvidenceStore
from src.dedupacq.services.server import start_server, stop_server
from src.dedupacq.tools.fixtures import build_test_image
from src.dedupacq.tools.hashing import content_hash

# Smallest convenient FAT16 volume: 512-byte clusters, a little over 5000 of them.
SMALL_PARTITION = 2_621_440
# Same geometry, room for more files.
PARTITION = 4 * 1024 * 1024

ACQUIRED_AT = datetime(2017, 3, 14, 9, 26, 52, tzinfo=timezone.utc)


def evidence_spec(**overrides: Any) -> Dict[str, Any]:
    """One FAT16 partition holding duplicates, a fragmented file, a long name,
    a subdirectory and a deleted file."""
    partition: Dict[str, Any] = {
        "variant": "FAT16",
        "size": PARTITION,
        "sectors_per_cluster": 1,
        "label": "EVIDENCE",
        "fill_seed": 3,
        "directories": ["/DOCS"],
        "files": [
            {"path": "/DOCS/report.txt", "content": "quarterly figures\n" * 300},
            {"path": "/copy{n}.bin", "count": 3, "size": 8192, "seed": 7},
            {"path": "/frag.bin", "size": 6000, "seed": 11, "fragment": True},
            {"path": "/gone.txt", "content": "delete me"},
            {"path": "/A long file name.txt", "size": 700, "seed": 5},
        ],
        "delete": ["/gone.txt"],
    }
    partition.update(overrides)
    return {"seed": 1, "partitions": [partition], "trailing_bytes": 4096}


def random_spec(seed: int) -> Dict[str, Any]:
    """A random but valid small fixture for property tests."""
    rng = random.Random(seed)
    files = []
    for n in range(rng.randint(0, 12)):
        files.append(
            {
                "path": f"/D{n % 3}/f{n}.bin" if rng.random() < 0.4 else f"/f{n}.bin",
                "size": rng.choice([0, 1, 511, 512, 513, 3000, 9000]),
                "seed": rng.randint(0, 5),
                "fragment": rng.random() < 0.3,
            }
        )
    deletable = [f["path"] for f in files if f["size"]]
    delete = rng.sample(deletable, min(len(deletable), rng.randint(0, 2)))
    partition: Dict[str, Any] = {
        "variant": "FAT16",
        "size": SMALL_PARTITION,
        "sectors_per_cluster": 1,
        "files": files,
        "delete": delete,
    }
    if rng.random() < 0.5:
        partition["fill_seed"] = seed
    return {
        "seed": seed,
        "partitions": [partition],
        "trailing_bytes": rng.choice([0, 512, 70_000]),
    }


@pytest.fixture
def evidence_image(tmp_path):
    """Path and ground truth of the standard evidence fixture."""
    return build_test_image(evidence_spec(), tmp_path / "evidence.img")


@pytest.fixture
def store(tmp_path):
    """An empty local evidence store."""
    return EvidenceStore(tmp_path / "store")


def chunk_manifest(
    chunks: Sequence[bytes],
    kinds: Optional[List[ArtifactKind]] = None,
    disk_id: str = "D1",
) -> Manifest:
    """A manifest tiling the concatenation of ``chunks``, one artifact each."""
    artifacts = []
    offset = 0
    for n, chunk in enumerate(chunks):
        kind = kinds[n] if kinds else ArtifactKind.UNALLOCATED
        artifacts.append(
            Artifact(
                kind=kind,
                extents=ExtentList.from_pairs([(offset, len(chunk))]),
                digest=content_hash(chunk),
                path=f"/file{n}.bin" if kind is ArtifactKind.FILE_DATA else None,
            )
        )
        offset += len(chunk)
    return Manifest(
        case_id="C1",
        investigator_id="I1",
        disk_id=disk_id,
        acquired_at=ACQUIRED_AT,
        image_size=offset,
        image_digest=content_hash(b"".join(chunks)),
        artifacts=tuple(artifacts),
    )


def commit_chunks(store: EvidenceStore, chunks: Sequence[bytes], **kwargs: Any) -> str:
    """Upload every chunk and commit the manifest that tiles them."""
    for chunk in chunks:
        store.put_artifact(content_hash(chunk), chunk)
    return store.commit_manifest(chunk_manifest(chunks, **kwargs))


@pytest.fixture
def server(store):
    """An evidence server on a free loopback port, backed by ``store``."""
    instance, thread = start_server(store)
    yield instance
    stop_server(instance, thread)
