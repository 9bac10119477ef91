"""Tests for the content-addressed evidence store."""

import errno
import hashlib
import random
import threading
from unittest.mock import patch

import pytest

from src.dedupacq.errors import (
    BatchTooLarge,
    ConfigError,
    DanglingDigest,
    DigestMismatch,
    InvalidManifest,
    NotFound,
    StorageError,
)
from src.dedupacq.models import ArtifactKind, Manifest, manifest_canonical_bytes
from src.dedupacq.services import EvidenceStore
from src.dedupacq.tools.hashing import content_hash
from src.dedupacq.tools.wire import PutStatus

from .conftest import chunk_manifest, commit_chunks


class TestBlobs:
    """Test cases for blob storage."""

    def test_put_and_get(self, store) -> None:
        """Test a stored blob reads back under its digest path."""
        digest = content_hash(b"payload")
        assert store.put_artifact(digest, b"payload") is PutStatus.STORED
        assert store.get_artifact(digest) == b"payload"
        assert store.artifact_size(digest) == 7
        path = store.blob_path(digest)
        assert path.parent.name == digest.hex[:2]
        assert path.name == digest.hex[2:]
        assert store.digest_log.read_text() == digest.hex + "\n"

    def test_put_is_idempotent(self, store) -> None:
        """Test a second put of the same digest writes nothing."""
        digest = content_hash(b"payload")
        store.put_artifact(digest, b"payload")
        assert store.put_artifact(digest, b"payload") is PutStatus.ALREADY_PRESENT
        assert store.digest_log.read_text().count("\n") == 1

    def test_digest_mismatch(self, store) -> None:
        """Test bytes that do not hash to the claimed digest are refused."""
        digest = content_hash(b"claimed")
        with pytest.raises(DigestMismatch):
            store.put_artifact(digest, b"actual")
        assert not store.blob_path(digest).exists()
        assert list(store.tmp_dir.iterdir()) == []
        assert store.has_digests([digest]) == [False]

    def test_chunked_payload(self, store) -> None:
        """Test iterables of chunks are accepted."""
        data = b"x" * 10_000
        store.put_artifact(content_hash(data), iter([data[:3000], data[3000:]]))
        assert b"".join(store.read_artifact(content_hash(data), 4096)) == data

    def test_payload_error_propagates(self, store) -> None:
        """Test a payload source failing mid-stream is not a storage error."""
        data = b"y" * 5000

        def dropped_connection():
            yield data[:1000]
            raise ConnectionResetError("peer went away")

        with pytest.raises(ConnectionResetError):
            store.put_artifact(content_hash(data), dropped_connection())
        assert store.has_digests([content_hash(data)]) == [False]
        assert list(store.tmp_dir.iterdir()) == []

    def test_write_failure_is_storage_error(self, store) -> None:
        """Test a failing disk write is reported as a storage error."""
        digest = content_hash(b"payload")
        with patch("src.dedupacq.services.store.os.fsync") as mock_fsync:
            mock_fsync.side_effect = OSError(errno.ENOSPC, "No space left on device")
            with pytest.raises(StorageError, match="disk full"):
                store.put_artifact(digest, b"payload")
        assert store.has_digests([digest]) == [False]

    def test_has_digests(self, store) -> None:
        """Test membership answers keep request order."""
        a, b = content_hash(b"a"), content_hash(b"b")
        store.put_artifact(b, b"b")
        assert store.has_digests([a, b, a]) == [False, True, False]
        assert store.has_digests([]) == []

    def test_batch_limit(self, tmp_path) -> None:
        """Test oversized membership batches are rejected."""
        store = EvidenceStore(tmp_path / "s", max_check_batch=2)
        with pytest.raises(BatchTooLarge):
            store.has_digests([content_hash(bytes([n])) for n in range(3)])

    def test_invalid_batch_limit(self, tmp_path) -> None:
        """Test the batch limit must fit the wire count field."""
        with pytest.raises(ConfigError):
            EvidenceStore(tmp_path / "s", max_check_batch=0)

    def test_missing_blob(self, store) -> None:
        """Test unknown digests raise NotFound."""
        with pytest.raises(NotFound):
            store.get_artifact(content_hash(b"nothing"))
        with pytest.raises(NotFound):
            store.artifact_size(content_hash(b"nothing"))

    def test_concurrent_puts_of_one_digest(self, store) -> None:
        """Test racing puts store the blob exactly once."""
        data = b"race" * 1000
        digest = content_hash(data)
        results = []

        def put() -> None:
            results.append(store.put_artifact(digest, data))

        threads = [threading.Thread(target=put) for _ in range(8)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        assert results.count(PutStatus.STORED) == 1
        assert results.count(PutStatus.ALREADY_PRESENT) == 7
        assert store.digest_log.read_text().count("\n") == 1


class TestManifests:
    """Test cases for manifest commits and reads."""

    def test_commit_and_read(self, store) -> None:
        """Test a committed manifest reads back equal, under its content id."""
        manifest_id = commit_chunks(store, [b"a" * 100, b"b" * 50])
        data = store.get_manifest_bytes(manifest_id)
        assert hashlib.sha256(data).hexdigest() == manifest_id
        manifest = store.get_manifest(manifest_id)
        assert manifest == chunk_manifest([b"a" * 100, b"b" * 50])
        assert manifest.manifest_id == manifest_id
        assert store.get_manifest(manifest_id.upper()) == manifest

    def test_commit_idempotent(self, store) -> None:
        """Test committing the same manifest twice changes nothing."""
        first = commit_chunks(store, [b"one", b"two"])
        second = commit_chunks(store, [b"one", b"two"])
        assert first == second
        assert len(store.list_manifests()) == 1
        assert store.store_stats().manifest_count == 1

    def test_dangling_digest(self, store) -> None:
        """Test a manifest referencing unstored content is refused."""
        store.put_artifact(content_hash(b"one"), b"one")
        with pytest.raises(DanglingDigest) as info:
            store.commit_manifest(chunk_manifest([b"one", b"two"]))
        assert content_hash(b"two").hex in str(info.value)
        assert store.list_manifests() == []

    def test_coverage_failure(self, store) -> None:
        """Test a manifest that does not tile its image is invalid."""
        manifest = chunk_manifest([b"one"])
        store.put_artifact(content_hash(b"one"), b"one")
        broken = Manifest(**{**manifest.__dict__, "image_size": 10})
        with pytest.raises(InvalidManifest):
            store.commit_manifest(broken)

    def test_commit_bytes(self, store) -> None:
        """Test canonical manifest bytes commit like the manifest itself."""
        store.put_artifact(content_hash(b"one"), b"one")
        data = manifest_canonical_bytes(chunk_manifest([b"one"]))
        assert store.commit_manifest_bytes(data) == hashlib.sha256(data).hexdigest()
        with pytest.raises(InvalidManifest):
            store.commit_manifest_bytes(b"{}")

    @pytest.mark.parametrize("manifest_id", ["0" * 64, "not-an-id", "../etc/passwd"])
    def test_unknown_manifest(self, store, manifest_id: str) -> None:
        """Test unknown or malformed manifest ids raise NotFound."""
        with pytest.raises(NotFound):
            store.get_manifest(manifest_id)

    def test_list_in_commit_order(self, store) -> None:
        """Test summaries come back in commit order with new-digest counts."""
        first = commit_chunks(store, [b"a", b"b"], disk_id="D1")
        second = commit_chunks(store, [b"a", b"c", b"c"], disk_id="D2")
        summaries = store.list_manifests()
        assert [s.manifest_id for s in summaries] == [first, second]
        assert [s.new_digests for s in summaries] == [2, 1]
        assert summaries[1].artifact_count == 3
        assert summaries[1].acquired_at == "2017-03-14T09:26:52Z"


class TestQueries:
    """Test cases for store statistics and lookups."""

    def test_stats(self, store) -> None:
        """Test logical and physical byte accounting."""
        commit_chunks(store, [b"a" * 100, b"b" * 100, b"a" * 100], disk_id="D1")
        commit_chunks(store, [b"a" * 100, b"c" * 100], disk_id="D2")
        stats = store.store_stats()
        assert stats.unique_artifacts == 3
        assert stats.logical_bytes == 500
        assert stats.physical_bytes == 300
        assert stats.manifest_count == 2
        assert stats.dedup_ratio == pytest.approx(0.4)

    def test_empty_store_stats(self, store) -> None:
        """Test an empty store reports zeros."""
        stats = store.store_stats()
        assert stats.unique_artifacts == stats.logical_bytes == 0
        assert stats.dedup_ratio == 0.0

    def test_query_duplicates(self, store) -> None:
        """Test every occurrence of a digest is listed across manifests."""
        first = commit_chunks(store, [b"a" * 10, b"b" * 10, b"a" * 10], disk_id="D1")
        second = commit_chunks(store, [b"a" * 10], disk_id="D2")
        records = store.query_duplicates(content_hash(b"a" * 10))
        assert len(records) == 3
        assert {r.manifest_id for r in records} == {first, second}
        assert [r.offset for r in records if r.manifest_id == first] == [0, 20]
        assert all(r.label == "unallocated" for r in records)
        assert store.query_duplicates(content_hash(b"zzz")) == []

    def test_state_survives_reopen(self, store) -> None:
        """Test indexes are rebuilt from the logs on restart."""
        manifest_id = commit_chunks(store, [b"a" * 10, b"b" * 10, b"a" * 10])
        reopened = EvidenceStore(store.root)
        assert reopened.store_stats() == store.store_stats()
        assert [s.manifest_id for s in reopened.list_manifests()] == [manifest_id]
        assert reopened.has_digests([content_hash(b"b" * 10)]) == [True]
        assert len(reopened.query_duplicates(content_hash(b"a" * 10))) == 2

    def test_torn_log_line_dropped(self, store) -> None:
        """Test a partial trailing log record is truncated on open."""
        commit_chunks(store, [b"a"])
        with open(store.digest_log, "a") as fp:
            fp.write("abcd")
        reopened = EvidenceStore(store.root)
        assert reopened.digest_log.read_text().endswith("\n")
        assert reopened.has_digests([content_hash(b"a")]) == [True]

    def test_stale_staging_swept(self, store) -> None:
        """Test leftover staging files are removed on open."""
        (store.tmp_dir / "dead.part").write_bytes(b"junk")
        reopened = EvidenceStore(store.root)
        assert reopened.stale_swept == 1
        assert list(reopened.tmp_dir.iterdir()) == []


class TestFuzzyIndex:
    """Test cases for the store's fuzzy index."""

    def _commit_files(self, store, chunks):
        kinds = [ArtifactKind.FILE_DATA] * len(chunks)
        return commit_chunks(store, chunks, kinds=kinds)

    def test_reindex_and_near_matches(self, store) -> None:
        """Test rebuilt fuzzy digests find similar file contents."""
        base = b"".join(b"line %d of the ledger\n" % n for n in range(2000))
        edited = base.replace(b"line 1000 ", b"LINE 1000 ")
        self._commit_files(store, [base, edited, b"tiny"])
        assert store.rebuild_fuzzy_index() == 2
        query = store.fuzzy_index.get(content_hash(base))
        assert query is not None
        matches = store.near_matches(query, 50)
        assert matches[0].digest == content_hash(base).hex
        assert matches[0].score == 100
        assert content_hash(edited).hex in [m.digest for m in matches]
        assert store.fuzzy_file.read_text().count("\n") == 2

    def test_reindex_survives_reopen(self, store) -> None:
        """Test the index file is reloaded on open."""
        self._commit_files(store, [bytes(range(256)) * 40])
        store.rebuild_fuzzy_index()
        assert len(EvidenceStore(store.root).fuzzy_index) == 1

    def test_reindex_keeps_concurrent_commit(self, store) -> None:
        """Test a manifest committed while reindexing is not lost."""
        early = random.Random(1).randbytes(6000)
        late = random.Random(2).randbytes(7000)
        self._commit_files(store, [early])
        read_artifact = store.read_artifact
        committed = []

        def commit_while_reading(digest, *args):
            if not committed:
                committed.append(self._commit_files(store, [late]))
            return read_artifact(digest, *args)

        with patch.object(store, "read_artifact", side_effect=commit_while_reading):
            assert store.rebuild_fuzzy_index() == 2
        assert len(store.list_manifests()) == 2
        assert store.fuzzy_index.get(content_hash(late)) is not None
        reopened = EvidenceStore(store.root)
        assert reopened.fuzzy_index.get(content_hash(late)) is not None


class TestAudit:
    """Test cases for the store audit."""

    def test_clean_store(self, store) -> None:
        """Test a consistent store audits clean."""
        commit_chunks(store, [b"a", b"b"])
        store.put_artifact(content_hash(b"orphan"), b"orphan")
        report = store.audit_store()
        assert report.clean
        assert report.blobs_checked == 3
        assert report.manifests_checked == 1
        assert report.orphan_blobs == [content_hash(b"orphan").hex]

    def test_corrupt_blob(self, store) -> None:
        """Test a blob whose bytes changed is reported."""
        commit_chunks(store, [b"a", b"b"])
        store.blob_path(content_hash(b"a")).write_bytes(b"tampered")
        report = store.audit_store()
        kinds = {v.kind for v in report.violations}
        assert "corrupt_blob" in kinds
        assert "dangling_digest" in kinds

    def test_missing_blob(self, store) -> None:
        """Test a logged blob that vanished is reported."""
        commit_chunks(store, [b"a"])
        store.blob_path(content_hash(b"a")).unlink()
        kinds = [v.kind for v in store.audit_store().violations]
        assert "missing_blob" in kinds

    def test_unexpected_and_unindexed_files(self, store) -> None:
        """Test stray files and unlogged blobs are reported."""
        digest = content_hash(b"sneaky")
        path = store.blob_path(digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"sneaky")
        (path.parent / "README").write_text("hi")
        kinds = sorted(v.kind for v in store.audit_store().violations)
        assert kinds == ["unexpected_file", "unindexed_blob"]

    def test_manifest_id_mismatch(self, store) -> None:
        """Test a manifest file whose name is not its hash is reported."""
        manifest_id = commit_chunks(store, [b"a"])
        path = store.manifest_dir / f"{manifest_id}.json"
        path.write_bytes(path.read_bytes().replace(b'"C1"', b'"C2"'))
        kinds = [v.kind for v in store.audit_store().violations]
        assert kinds == ["manifest_id_mismatch"]

    def test_invalid_manifest(self, store) -> None:
        """Test an unparseable manifest file is reported."""
        (store.manifest_dir / ("ab" * 32 + ".json")).write_bytes(b"garbage")
        kinds = sorted(v.kind for v in store.audit_store().violations)
        assert kinds == ["invalid_manifest", "manifest_id_mismatch"]

    def test_stale_temp_counted(self, store) -> None:
        """Test staging files present during the audit are counted."""
        (store.tmp_dir / "x.part").write_bytes(b"")
        report = store.audit_store()
        assert report.stale_temp_files == 1
        assert report.clean
