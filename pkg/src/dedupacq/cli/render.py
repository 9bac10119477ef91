"""Report rendering: aligned rich tables for people, JSON documents for tools."""

import json
from io import StringIO
from typing import Any, Callable, Dict, Iterable, List, Tuple

from rich.console import Console, Group, RenderableType
from rich.table import Table

from ..errors import ConfigError
from ..models import (
    AcquisitionReport,
    AuditReport,
    BenchmarkReport,
    DuplicateReport,
    ExtractionResult,
    InspectionReport,
    ManifestListing,
    NearMatchReport,
    ReconstructionReport,
    ReindexReport,
    StoreStats,
    VerificationResult,
)
from ..tools.fixtures import FixtureResult
from .schemas import schema_id

FORMATS = ("table", "json")
RENDER_WIDTH = 120
HISTOGRAM_ROWS = 20


def _size(n: int) -> str:
    value = float(n)
    for unit in ("B", "KiB", "MiB", "GiB", "TiB"):
        if value < 1024 or unit == "TiB":
            return f"{n} B" if unit == "B" else f"{value:.1f} {unit}"
        value /= 1024
    return f"{n} B"


def _seconds(value: float) -> str:
    return f"{value:.3f}s"


def _percent(value: float) -> str:
    return f"{value * 100:.2f}%"


def _pairs(title: str, rows: Iterable[Tuple[str, Any]]) -> Table:
    table = Table(title=title, show_header=False, title_justify="left")
    table.add_column("field", style="bold")
    table.add_column("value")
    for name, value in rows:
        table.add_row(name, str(value))
    return table


def _histogram(histogram: Dict[str, int], title: str) -> Table:
    table = Table(title=title, title_justify="left")
    table.add_column("count", justify="right")
    table.add_column("digest")
    for digest, count in list(histogram.items())[:HISTOGRAM_ROWS]:
        table.add_row(str(count), digest)
    if len(histogram) > HISTOGRAM_ROWS:
        table.caption = f"{len(histogram) - HISTOGRAM_ROWS} more not shown"
    return table


def _acquisition_rows(r: AcquisitionReport) -> List[Tuple[str, str]]:
    return [
        ("wall time", _seconds(r.wall_time)),
        ("  enumerate", _seconds(r.timings.enumerate)),
        ("  hash", _seconds(r.timings.hash)),
        ("  check", _seconds(r.timings.check)),
        ("  upload", _seconds(r.timings.upload)),
        ("  commit", _seconds(r.timings.commit)),
        ("artifacts", str(r.artifact_count)),
        ("duplicates", str(r.duplicate_count)),
        ("  within image", str(r.intra_image_duplicates)),
        ("  already stored", str(r.store_duplicates)),
        ("uploaded", str(r.unique_uploaded_count)),
        ("duplicate ratio", _percent(r.duplicate_ratio)),
        ("file duplicate ratio", _percent(r.file_duplicate_ratio)),
        ("bytes read", _size(r.bytes_read)),
        ("metadata bytes read", _size(r.metadata_bytes_read)),
        ("payload transferred", _size(r.payload_bytes_transferred)),
        ("payload spilled to disk", _size(r.spilled_bytes)),
    ]


def _acquisition_table(r: AcquisitionReport) -> RenderableType:
    head = _pairs(
        "Acquisition",
        [
            ("manifest", r.manifest_id),
            ("image", r.image_path),
            ("image size", _size(r.image_size)),
            ("image digest", r.image_digest),
        ]
        + _acquisition_rows(r),
    )
    if not r.histogram:
        return head
    return Group(head, _histogram(r.histogram, "Duplicated content in this image"))


def _benchmark_table(r: BenchmarkReport) -> RenderableType:
    link = f", link {r.link_mbit} Mbit/s" if r.link_mbit else ""
    table = Table(title=f"{r.image_path} ({r.mode}{link})", title_justify="left")
    table.add_column("")
    columns: List[List[Tuple[str, str]]] = []
    for run in r.runs:
        suffix = f" #{run.repetition}" if len(r.runs) > 1 else ""
        table.add_column(f"initial{suffix}", justify="right")
        table.add_column(f"re-acquisition{suffix}", justify="right")
        columns.append(_acquisition_rows(run.initial))
        columns.append(_acquisition_rows(run.second))
    for i, (name, _) in enumerate(columns[0]):
        table.add_row(name, *(col[i][1] for col in columns))
    return table


def _inspection_table(r: InspectionReport) -> RenderableType:
    head = _pairs(
        "Inspection",
        [
            ("image", r.image_path),
            ("image size", _size(r.image_size)),
            ("image digest", r.image_digest),
            ("artifacts", len(r.rows)),
            ("bytes read", _size(r.bytes_read)),
            ("wall time", _seconds(r.wall_time)),
        ],
    )
    kinds = Table(title="Artifacts by kind", title_justify="left")
    kinds.add_column("kind")
    kinds.add_column("count", justify="right")
    for kind, count in r.kind_counts.items():
        kinds.add_row(kind, str(count))
    return Group(head, kinds, _histogram(r.histogram, "Duplicated content"))


def _inventory_table(r: InspectionReport) -> Table:
    table = Table(title="Artifact inventory", title_justify="left")
    for name in ("offset", "size", "extents"):
        table.add_column(name, justify="right")
    table.add_column("kind")
    table.add_column("digest")
    table.add_column("label")
    for row in r.rows:
        table.add_row(
            str(row.offset),
            str(row.size),
            str(row.extent_count),
            row.kind,
            row.digest[:16],
            row.label,
        )
    return table


def _reconstruction_table(r: ReconstructionReport) -> RenderableType:
    return _pairs(
        "Reconstruction",
        [
            ("manifest", r.manifest_id),
            ("output", r.output_path),
            ("bytes written", _size(r.bytes_written)),
            ("artifacts placed", r.artifacts_placed),
            ("sparse staging", "yes" if r.sparse else "no"),
            ("expected digest", r.expected_digest),
            ("computed digest", r.computed_digest),
            ("verification", "pass" if r.passed else "FAIL"),
            ("wall time", _seconds(r.wall_time)),
        ],
    )


def _verification_table(r: VerificationResult) -> RenderableType:
    rows: List[Tuple[str, Any]] = [
        ("image", r.image_path),
        ("manifest", r.manifest_id or "-"),
        ("size", f"{r.actual_size} (expected {r.expected_size})"),
        ("expected digest", r.expected_digest),
        ("computed digest", r.computed_digest or "-"),
        ("sampled artifacts", r.sampled),
    ]
    rows += [("corrupt", label) for label in r.corrupt_artifacts]
    rows.append(("result", "PASS" if r.passed else "FAIL"))
    return _pairs("Verification", rows)


def _extraction_table(r: ExtractionResult) -> RenderableType:
    head = _pairs(
        "Extraction",
        [
            ("selector", r.selector),
            ("output", r.output_path),
            ("bytes written", _size(r.bytes_written)),
            ("digest", r.digest),
            ("placements", len(r.placements)),
        ],
    )
    places = Table(title="Placements", title_justify="left")
    places.add_column("offset", justify="right")
    places.add_column("kind")
    places.add_column("label")
    for p in r.placements:
        places.add_row(str(p.offset), p.kind, p.label)
    return Group(head, places)


def _stats_table(r: StoreStats) -> RenderableType:
    return _pairs(
        "Evidence store",
        [
            ("manifests", r.manifest_count),
            ("unique artifacts", r.unique_artifacts),
            ("logical bytes", _size(r.logical_bytes)),
            ("physical bytes", _size(r.physical_bytes)),
            ("deduplication", _percent(r.dedup_ratio)),
        ],
    )


def _duplicates_table(r: DuplicateReport) -> RenderableType:
    table = Table(
        title=f"{r.digest}: {len(r.occurrences)} occurrences", title_justify="left"
    )
    table.add_column("manifest")
    table.add_column("offset", justify="right")
    table.add_column("label")
    for o in r.occurrences:
        table.add_row(o.manifest_id, str(o.offset), o.label)
    return table


def _audit_table(r: AuditReport) -> RenderableType:
    head = _pairs(
        "Store audit",
        [
            ("blobs checked", r.blobs_checked),
            ("manifests checked", r.manifests_checked),
            ("violations", len(r.violations)),
            ("orphan blobs", len(r.orphan_blobs)),
            ("stale temp files", r.stale_temp_files),
            ("result", "clean" if r.clean else "VIOLATIONS"),
        ],
    )
    if r.clean:
        return head
    table = Table(title="Violations", title_justify="left")
    for name in ("kind", "subject", "detail"):
        table.add_column(name)
    for v in r.violations:
        table.add_row(v.kind, v.subject, v.detail)
    return Group(head, table)


def _manifests_table(r: ManifestListing) -> RenderableType:
    table = Table(title="Acquisitions in commit order", title_justify="left")
    table.add_column("#", justify="right")
    for name in ("acquired", "case", "disk", "manifest"):
        table.add_column(name)
    for name in ("artifacts", "logical", "new digests"):
        table.add_column(name, justify="right")
    for n, m in enumerate(r.manifests, 1):
        table.add_row(
            str(n),
            m.acquired_at,
            m.case_id,
            m.disk_id,
            m.manifest_id,
            str(m.artifact_count),
            _size(m.logical_bytes),
            str(m.new_digests),
        )
    return table


def _near_table(r: NearMatchReport) -> RenderableType:
    table = Table(
        title=f"Matches for {r.query} (score >= {r.threshold})", title_justify="left"
    )
    table.add_column("score", justify="right")
    table.add_column("digest")
    for m in r.matches:
        table.add_row(str(m.score), m.digest)
    return table


def _reindex_table(r: ReindexReport) -> RenderableType:
    return _pairs("Fuzzy index", [("entries", r.entries)])


def _fixture_table(r: FixtureResult) -> RenderableType:
    head = _pairs(
        "Fixture image",
        [
            ("image", r.image_path),
            ("size", _size(r.image_size)),
            ("files", len(r.files)),
            ("directories", len(r.directories)),
            ("deleted", len(r.deleted)),
            ("modified", len(r.modified)),
        ],
    )
    parts = Table(title="Partitions", title_justify="left")
    for name in ("#", "variant", "start LBA", "sectors", "cluster", "clusters"):
        parts.add_column(name, justify="right")
    for p in r.partitions:
        parts.add_row(
            str(p.index),
            p.variant,
            str(p.start_lba),
            str(p.sector_count),
            str(p.cluster_size),
            str(p.cluster_count),
        )
    return Group(head, parts)


_RENDERERS: Dict[type, Tuple[str, Callable[[Any], RenderableType]]] = {
    AcquisitionReport: ("acquisition", _acquisition_table),
    InspectionReport: ("inspection", _inspection_table),
    BenchmarkReport: ("benchmark", _benchmark_table),
    ReconstructionReport: ("reconstruction", _reconstruction_table),
    VerificationResult: ("verification", _verification_table),
    ExtractionResult: ("extraction", _extraction_table),
    StoreStats: ("stats", _stats_table),
    DuplicateReport: ("duplicates", _duplicates_table),
    AuditReport: ("audit", _audit_table),
    ManifestListing: ("manifests", _manifests_table),
    NearMatchReport: ("near", _near_table),
    ReindexReport: ("reindex", _reindex_table),
    FixtureResult: ("fixture", _fixture_table),
}


def report_document(report: Any) -> Dict[str, Any]:
    """The JSON document of a report, led by its schema id."""
    name, _ = _RENDERERS[type(report)]
    return {"schema": schema_id(name), **report.to_dict()}


def render_report(report: Any, fmt: str = "table", inventory: bool = False) -> str:
    """Render ``report`` as an aligned table or as a JSON document."""
    if fmt not in FORMATS:
        raise ConfigError(f"Unknown output format {fmt!r}")
    if type(report) not in _RENDERERS:
        raise TypeError(f"No renderer for {type(report).__name__}")
    if fmt == "json":
        return json.dumps(report_document(report), indent=2)

    _, renderer = _RENDERERS[type(report)]
    renderable = renderer(report)
    if inventory and isinstance(report, InspectionReport):
        renderable = Group(_inventory_table(report), renderable)
    console = Console(
        file=StringIO(),
        width=RENDER_WIDTH,
        color_system=None,
        force_terminal=False,
    )
    with console.capture() as capture:
        console.print(renderable)
    return capture.get().rstrip("\n")
