"""Tests for acquisition, inspection and benchmarking."""

from unittest.mock import Mock, patch

import pytest

from src.dedupacq.errors import (
    AcquisitionError,
    ConfigError,
    ResumableFailure,
    StorageError,
    Unreachable,
)
from src.dedupacq.models import ArtifactKind, BytesSource, ImageSource
from src.dedupacq.services import (
    AcquisitionConfig,
    EvidenceStore,
    RemoteStore,
    acquire,
    benchmark,
    inspect,
)
from src.dedupacq.services.acquisition import _PayloadBuffer, _Stages, _Sweep
from src.dedupacq.tools.fat import enumerate_artifacts, plan_artifacts
from src.dedupacq.tools.fixtures import build_test_image
from src.dedupacq.tools.hashing import content_hash
from src.dedupacq.tools.wire import PutStatus

from .conftest import ACQUIRED_AT, PARTITION, evidence_spec


def _config(**overrides) -> AcquisitionConfig:
    settings = dict(
        case_id="CASE-1",
        investigator_id="inv-7",
        disk_id="disk-A",
        acquired_at=ACQUIRED_AT,
        hash_workers=2,
        upload_connections=2,
    )
    settings.update(overrides)
    return AcquisitionConfig(**settings)


class TestAcquire:
    """Test cases for acquire."""

    def test_initial_acquisition(self, evidence_image, store) -> None:
        """Test a first acquisition uploads every distinct artifact once."""
        report = acquire(evidence_image.image_path, _config(), store)
        image_bytes = evidence_image.image_path.read_bytes()
        assert report.image_size == evidence_image.image_size
        assert report.image_digest == content_hash(image_bytes).hex
        assert report.bytes_read == evidence_image.image_size
        assert report.store_duplicates == 0
        assert report.duplicate_count == report.intra_image_duplicates
        assert report.duplicate_count + report.unique_uploaded_count == (
            report.artifact_count
        )
        assert report.file_artifacts == 6
        assert report.file_duplicates == 2
        assert report.payload_bytes_transferred > 0
        assert report.spilled_bytes == 0
        copy_digest = content_hash(evidence_image.file("/copy0.bin").content).hex
        assert report.histogram[copy_digest] >= 3

        manifest = store.get_manifest(report.manifest_id)
        assert manifest.case_id == "CASE-1"
        assert manifest.acquired_at == ACQUIRED_AT
        assert len(manifest.artifacts) == report.artifact_count
        assert all(store.has_digests(manifest.digests()))

    def test_image_read_once(self, evidence_image, store) -> None:
        """Test uploads come from the single pass, not from the image again."""
        opened = []

        class RecordingSource(ImageSource):
            def __init__(self, path) -> None:
                super().__init__(path)
                opened.append(self)

        with patch("src.dedupacq.services.acquisition.ImageSource", RecordingSource):
            report = acquire(evidence_image.image_path, _config(), store)
        (image,) = opened
        assert report.unique_uploaded_count > 0
        assert report.bytes_read == evidence_image.image_size
        assert image.bytes_read == (
            report.metadata_bytes_read + evidence_image.image_size
        )

    def test_spilled_payloads(self, evidence_image, store, tmp_path) -> None:
        """Test payloads beyond the memory budget are uploaded from the spool."""
        report = acquire(evidence_image.image_path, _config(buffer_bytes=0), store)
        assert report.spilled_bytes == evidence_image.image_size
        assert report.bytes_read == evidence_image.image_size

        reference = acquire(
            evidence_image.image_path, _config(), EvidenceStore(tmp_path / "ref")
        )
        assert report.manifest_id == reference.manifest_id
        assert report.payload_bytes_transferred == (
            reference.payload_bytes_transferred
        )
        assert store.audit_store().clean

    def test_duplicate_census_agrees_with_store(self, evidence_image, store) -> None:
        """Test the histogram and the occurrence index count the same copies."""
        report = acquire(evidence_image.image_path, _config(), store)
        manifest = store.get_manifest(report.manifest_id)
        for digest in set(manifest.digests()):
            occurrences = store.query_duplicates(digest)
            assert report.histogram.get(digest.hex, 1) == len(occurrences)
            assert {o.manifest_id for o in occurrences} == {report.manifest_id}
        copy_digest = content_hash(evidence_image.file("/copy0.bin").content)
        assert len(store.query_duplicates(copy_digest)) >= 3

    def test_second_image_reuses_shared_content(
        self, evidence_image, store, tmp_path
    ) -> None:
        """Test a different image only adds the content the store lacks."""
        first = acquire(evidence_image.image_path, _config(), store)
        before = store.store_stats()
        spec = evidence_spec(
            label="OTHER",
            fill_seed=4,
            files=[
                {"path": "/copy{n}.bin", "count": 3, "size": 8192, "seed": 7},
                {"path": "/fresh.bin", "size": 5000, "seed": 99},
            ],
            delete=[],
        )
        other = build_test_image(spec, tmp_path / "other.img")
        second = acquire(other.image_path, _config(disk_id="disk-B"), store)
        after = store.store_stats()

        known = set(store.get_manifest(first.manifest_id).digests())
        sizes = {
            a.digest: a.logical_size
            for a in store.get_manifest(second.manifest_id).artifacts
        }
        shared = set(sizes) & known
        assert shared
        assert second.store_duplicates == len(shared)
        assert second.unique_uploaded_count == len(set(sizes) - known)
        assert after.physical_bytes - before.physical_bytes == sum(
            size for digest, size in sizes.items() if digest not in known
        )
        assert after.unique_artifacts == before.unique_artifacts + len(
            set(sizes) - known
        )

    def test_matches_local_enumeration(self, evidence_image, store) -> None:
        """Test the committed manifest holds the same artifacts as a local scan."""
        report = acquire(evidence_image.image_path, _config(), store)
        with ImageSource(evidence_image.image_path) as image:
            expected, _ = enumerate_artifacts(image)
        assert store.get_manifest(report.manifest_id).artifacts == tuple(expected)

    def test_reacquisition_uploads_nothing(self, evidence_image, store) -> None:
        """Test acquiring the same image again moves no payload."""
        first = acquire(evidence_image.image_path, _config(), store)
        second = acquire(evidence_image.image_path, _config(disk_id="disk-B"), store)
        assert second.unique_uploaded_count == 0
        assert second.payload_bytes_transferred == 0
        assert second.spilled_bytes == 0
        assert second.duplicate_count == second.artifact_count
        assert second.store_duplicates == (
            second.artifact_count - second.intra_image_duplicates
        )
        assert second.manifest_id != first.manifest_id
        assert store.store_stats().physical_bytes < store.store_stats().logical_bytes

    def test_same_acquisition_same_manifest(self, evidence_image, store) -> None:
        """Test identical acquisitions commit the same manifest id."""
        first = acquire(evidence_image.image_path, _config(), store)
        second = acquire(evidence_image.image_path, _config(), store)
        assert first.manifest_id == second.manifest_id
        assert store.store_stats().manifest_count == 1

    def test_through_server(self, evidence_image, server, tmp_path) -> None:
        """Test acquisition over the protocol commits the same manifest."""
        local = acquire(
            evidence_image.image_path, _config(), EvidenceStore(tmp_path / "local")
        )
        report = acquire(evidence_image.image_path, _config(endpoint=server.endpoint))
        assert report.manifest_id == local.manifest_id
        assert server.store.get_manifest(report.manifest_id)
        assert report.unique_uploaded_count == local.unique_uploaded_count

    def test_store_root_from_config(self, evidence_image, tmp_path) -> None:
        """Test the store can be named by its root in the configuration."""
        report = acquire(
            evidence_image.image_path, _config(store_root=tmp_path / "rooted")
        )
        assert EvidenceStore(tmp_path / "rooted").get_manifest(report.manifest_id)

    def test_small_check_batches(self, evidence_image, store) -> None:
        """Test presence checks never exceed the configured batch size."""
        backend = Mock(wraps=store)
        backend.max_check_batch = store.max_check_batch
        acquire(evidence_image.image_path, _config(check_batch=2), backend)
        sizes = [len(call.args[0]) for call in backend.has_digests.call_args_list]
        assert sizes
        assert max(sizes) <= 2

    def test_without_fuzzy(self, evidence_image, store) -> None:
        """Test fuzzy digests can be skipped."""
        report = acquire(evidence_image.image_path, _config(compute_fuzzy=False), store)
        manifest = store.get_manifest(report.manifest_id)
        assert all(a.fuzzy is None for a in manifest.artifacts)
        assert store.rebuild_fuzzy_index() > 0

    def test_split_artifacts(self, evidence_image, store) -> None:
        """Test a smaller artifact limit splits files into parts."""
        report = acquire(
            evidence_image.image_path, _config(max_artifact_size=4096), store
        )
        manifest = store.get_manifest(report.manifest_id)
        parts = [a.part for a in manifest.artifacts if a.path == "/copy1.bin"]
        assert parts == [0, 1]
        assert all(a.logical_size <= 4096 for a in manifest.artifacts)

    def test_identity_required(self, evidence_image, store) -> None:
        """Test case, investigator and disk ids are mandatory."""
        with pytest.raises(ConfigError, match="investigator_id"):
            acquire(evidence_image.image_path, _config(investigator_id=""), store)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"check_batch": 0},
            {"check_batch": 513},
            {"hash_workers": 0},
            {"upload_connections": 0},
            {"queue_depth": 0},
            {"buffer_bytes": -1},
            {"max_artifact_size": 0},
            {"endpoint": "lab:7311", "store_root": "store"},
        ],
    )
    def test_invalid_config(self, overrides: dict) -> None:
        """Test impossible settings are rejected."""
        with pytest.raises(ConfigError):
            _config(**overrides)


class TestAcquisitionFailures:
    """Test cases for interrupted acquisitions."""

    def test_upload_failure_is_resumable(self, evidence_image, store) -> None:
        """Test a store failure during upload commits nothing."""
        backend = Mock(wraps=store)
        backend.max_check_batch = store.max_check_batch
        backend.put_artifact.side_effect = StorageError("disk full")
        with pytest.raises(ResumableFailure) as excinfo:
            acquire(evidence_image.image_path, _config(), backend)
        assert excinfo.value.uploaded == 0
        assert isinstance(excinfo.value.cause, StorageError)
        assert store.list_manifests() == []

    def test_commit_failure_is_resumable(self, evidence_image, store) -> None:
        """Test losing the server at commit keeps the uploads for a retry."""
        backend = Mock(wraps=store)
        backend.max_check_batch = store.max_check_batch
        backend.commit_manifest.side_effect = Unreachable("server gone")
        with pytest.raises(ResumableFailure) as excinfo:
            acquire(evidence_image.image_path, _config(), backend)
        uploaded = excinfo.value.uploaded
        assert uploaded > 0
        assert store.list_manifests() == []

        retry = acquire(evidence_image.image_path, _config(), store)
        assert retry.unique_uploaded_count == 0
        assert retry.store_duplicates == uploaded

    def test_digest_mismatch_is_fatal(self, evidence_image, store) -> None:
        """Test an upload rejected as a digest mismatch is not resumable."""
        backend = Mock(wraps=store)
        backend.max_check_batch = store.max_check_batch
        backend.put_artifact.return_value = PutStatus.DIGEST_MISMATCH
        with pytest.raises(AcquisitionError, match="no longer matches") as excinfo:
            acquire(evidence_image.image_path, _config(), backend)
        assert not isinstance(excinfo.value, ResumableFailure)

    def test_missing_image(self, tmp_path, store) -> None:
        """Test a missing image fails before any store traffic."""
        backend = Mock(wraps=store)
        with pytest.raises(OSError):
            acquire(tmp_path / "absent.img", _config(), backend)
        backend.has_digests.assert_not_called()


class TestInspect:
    """Test cases for inspect."""

    def test_inventory(self, evidence_image) -> None:
        """Test inspection lists every artifact without a store."""
        report = inspect(evidence_image.image_path, hash_workers=2)
        assert report.image_size == evidence_image.image_size
        assert report.bytes_read == evidence_image.image_size
        assert report.kind_counts[ArtifactKind.FILE_DATA.value] == 6
        assert sum(report.kind_counts.values()) == len(report.rows)
        assert sum(row.size for row in report.rows) == report.image_size
        offsets = [row.offset for row in report.rows]
        assert offsets == sorted(offsets)
        copy_digest = content_hash(evidence_image.file("/copy0.bin").content).hex
        assert report.histogram[copy_digest] >= 3

    def test_agrees_with_acquisition(self, evidence_image, store) -> None:
        """Test inspection and acquisition see the same image."""
        local = inspect(evidence_image.image_path, compute_fuzzy=False)
        report = acquire(evidence_image.image_path, _config(), store)
        assert local.image_digest == report.image_digest
        assert len(local.rows) == report.artifact_count
        assert local.histogram == report.histogram


class TestBenchmark:
    """Test cases for benchmark."""

    @pytest.mark.parametrize("mode", ["direct", "loopback"])
    def test_runs(self, evidence_image, mode: str) -> None:
        """Test each run pairs an initial acquisition with a re-acquisition."""
        report = benchmark(evidence_image.image_path, _config(), 2, mode)
        assert [run.repetition for run in report.runs] == [1, 2]
        for run in report.runs:
            assert run.initial.unique_uploaded_count > 0
            assert run.second.unique_uploaded_count == 0
            assert run.initial.manifest_id == run.second.manifest_id

    def test_identity_defaults(self, evidence_image) -> None:
        """Test benchmarks fill in identity fields when none are given."""
        config = AcquisitionConfig(hash_workers=1, upload_connections=1)
        report = benchmark(evidence_image.image_path, config)
        assert report.runs[0].initial.artifact_count > 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"repetitions": 0},
            {"mode": "carrier-pigeon"},
            {"mode": "direct", "link_mbit": 100},
        ],
    )
    def test_invalid_arguments(self, evidence_image, kwargs: dict) -> None:
        """Test bad repetition counts, modes and throttles are rejected."""
        with pytest.raises(ConfigError):
            benchmark(evidence_image.image_path, _config(), **kwargs)


@pytest.mark.slow
class TestModifiedImageExperiment:
    """Test cases at the scale of the modified-files experiment."""

    def _spec(self, **partition) -> dict:
        files = [
            {
                "path": f"/D{k}/f{{n}}.bin",
                "count": 100,
                "size": 700,
                "seed": 1000 * k,
                "distinct": True,
            }
            for k in range(10)
        ]
        return {
            "seed": 5,
            "partitions": [
                {
                    "size": 2 * PARTITION,
                    "sectors_per_cluster": 1,
                    "directories": [f"/D{k}" for k in range(10)],
                    "files": files,
                    **partition,
                }
            ],
        }

    def test_modified_files_mostly_duplicates(self, tmp_path, store) -> None:
        """Test re-acquiring after half a percent of files changed."""
        base = build_test_image(self._spec(), tmp_path / "base.img")
        changed = build_test_image(
            self._spec(modify_fraction=0.005, modify_seed=9), tmp_path / "changed.img"
        )
        assert len(changed.modified) == 5
        acquire(base.image_path, _config(disk_id="base"), store)
        report = acquire(changed.image_path, _config(disk_id="changed"), store)
        assert report.file_artifacts == 1000
        assert report.file_duplicates == 995
        assert report.file_duplicate_ratio >= 0.99

    def test_large_evidence_round(self, tmp_path) -> None:
        """Test a larger image with many copies through the loopback server."""
        spec = evidence_spec(size=4 * PARTITION)
        spec["partitions"][0]["files"].append(
            {"path": "/many{n}.dat", "count": 200, "size": 3000, "seed": 2}
        )
        image = build_test_image(spec, tmp_path / "large.img")
        report = benchmark(image.image_path, _config(), 1, "loopback")
        (run,) = report.runs
        assert run.initial.file_duplicates >= 201
        assert run.second.payload_bytes_transferred == 0


class TestPayloadBuffer:
    """Test cases for holding payloads between hashing and upload."""

    def test_spills_over_budget(self) -> None:
        """Test chunks beyond the memory budget go to the spool in order."""
        buffer = _PayloadBuffer(limit=8)
        buffer.append(0, b"abcdef")
        buffer.append(0, b"ghij")
        buffer.append(1, b"kl")
        assert buffer.in_memory == 8
        assert buffer.spilled_bytes == 4
        assert b"".join(buffer.take(0)) == b"abcdefghij"
        assert buffer.in_memory == 2
        buffer.close()

    def test_drop_releases_memory(self) -> None:
        """Test dropped payloads no longer count against the budget."""
        buffer = _PayloadBuffer(limit=100)
        buffer.append(3, b"x" * 60)
        buffer.drop(3)
        assert buffer.in_memory == 0
        assert buffer.take(3) == []
        buffer.append(4, b"y" * 100)
        assert buffer.spilled_bytes == 0
        buffer.close()


class TestSweep:
    """Test cases for the streaming hash pass."""

    def test_queues_bounded_by_depth(self, evidence_image) -> None:
        """Test the worker queues together hold at most ``depth`` chunks."""
        data = evidence_image.image_path.read_bytes()
        planned, _ = plan_artifacts(BytesSource(data))
        sweep = _Sweep(BytesSource(data), planned, _Stages(), 4, False, 8)
        assert [q.maxsize for q in sweep.hash_qs] == [2, 2, 2, 2]

    def test_streams_chunks_to_one_worker(self, evidence_image) -> None:
        """Test digests of streamed artifacts match hashing them whole."""
        data = evidence_image.image_path.read_bytes()
        source = BytesSource(data)
        planned, _ = plan_artifacts(source)
        stages = _Stages()
        sweep = _Sweep(source, planned, stages, 3, False, 6)
        sweep.start()
        sweep.read()
        stages.join()
        assert stages.failure is None
        expected, _ = enumerate_artifacts(BytesSource(data), compute_fuzzy=False)
        assert [a.digest for a in expected] == sweep.digests
        assert sweep.image_digest == content_hash(data)
