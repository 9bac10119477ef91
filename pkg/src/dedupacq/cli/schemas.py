"""JSON Schemas of every report document the CLI emits.

Each document carries ``"schema": "dedupacq.<report>/<version>"``. A version
changes only when a field is removed or changes meaning.
"""

from typing import Any, Dict

SCHEMA_DIALECT = "https://json-schema.org/draft/2020-12/schema"

Schema = Dict[str, Any]

_INT = {"type": "integer", "minimum": 0}
_NUM = {"type": "number", "minimum": 0}
_STR = {"type": "string"}
_HEX = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
_OPT_STR = {"type": ["string", "null"]}
_HISTOGRAM = {"type": "object", "additionalProperties": {"type": "integer"}}


def _object(properties: Dict[str, Any]) -> Schema:
    return {
        "type": "object",
        "required": list(properties),
        "properties": properties,
    }


def _document(name: str, properties: Dict[str, Any]) -> Schema:
    schema = _object({"schema": {"const": schema_id(name)}, **properties})
    schema["$schema"] = SCHEMA_DIALECT
    schema["$id"] = schema_id(name)
    return schema


def schema_id(name: str, version: int = 1) -> str:
    return f"dedupacq.{name}/{version}"


_TIMINGS = _object(
    {"enumerate": _NUM, "hash": _NUM, "check": _NUM, "upload": _NUM, "commit": _NUM}
)

_ACQUISITION = _object(
    {
        "manifest_id": _HEX,
        "image_path": _STR,
        "image_size": _INT,
        "image_digest": _HEX,
        "artifact_count": _INT,
        "duplicate_count": _INT,
        "unique_uploaded_count": _INT,
        "intra_image_duplicates": _INT,
        "store_duplicates": _INT,
        "file_artifacts": _INT,
        "file_duplicates": _INT,
        "bytes_read": _INT,
        "metadata_bytes_read": _INT,
        "spilled_bytes": _INT,
        "payload_bytes_transferred": _INT,
        "wall_time": _NUM,
        "timings": _TIMINGS,
        "histogram": _HISTOGRAM,
        "duplicate_ratio": _NUM,
        "file_duplicate_ratio": _NUM,
    }
)

_ROW = _object(
    {
        "kind": _STR,
        "offset": _INT,
        "size": _INT,
        "extent_count": _INT,
        "digest": _HEX,
        "label": _STR,
    }
)

_OCCURRENCE = _object(
    {"digest": _HEX, "manifest_id": _HEX, "label": _STR, "offset": _INT}
)

_SUMMARY = _object(
    {
        "manifest_id": _HEX,
        "case_id": _STR,
        "investigator_id": _STR,
        "disk_id": _STR,
        "acquired_at": _STR,
        "artifact_count": _INT,
        "logical_bytes": _INT,
        "new_digests": _INT,
    }
)

SCHEMAS: Dict[str, Schema] = {
    "acquisition": _document("acquisition", _ACQUISITION["properties"]),
    "inspection": _document(
        "inspection",
        {
            "image_path": _STR,
            "image_size": _INT,
            "image_digest": _HEX,
            "artifacts": {"type": "array", "items": _ROW},
            "kind_counts": _HISTOGRAM,
            "histogram": _HISTOGRAM,
            "bytes_read": _INT,
            "wall_time": _NUM,
        },
    ),
    "benchmark": _document(
        "benchmark",
        {
            "image_path": _STR,
            "mode": {"enum": ["direct", "loopback"]},
            "link_mbit": {"type": ["number", "null"]},
            "runs": {
                "type": "array",
                "minItems": 1,
                "items": _object(
                    {
                        "repetition": _INT,
                        "initial": _ACQUISITION,
                        "second": _ACQUISITION,
                    }
                ),
            },
        },
    ),
    "reconstruction": _document(
        "reconstruction",
        {
            "manifest_id": _HEX,
            "output_path": _STR,
            "bytes_written": _INT,
            "artifacts_placed": _INT,
            "expected_digest": _HEX,
            "computed_digest": _HEX,
            "sparse": {"type": "boolean"},
            "wall_time": _NUM,
            "verification": {"enum": ["pass", "fail"]},
        },
    ),
    "verification": _document(
        "verification",
        {
            "image_path": _STR,
            "manifest_id": _OPT_STR,
            "expected_size": _INT,
            "actual_size": _INT,
            "expected_digest": _HEX,
            "computed_digest": _OPT_STR,
            "sampled": _INT,
            "corrupt_artifacts": {"type": "array", "items": _STR},
            "size_ok": {"type": "boolean"},
            "digest_ok": {"type": "boolean"},
            "passed": {"type": "boolean"},
        },
    ),
    "extraction": _document(
        "extraction",
        {
            "manifest_id": _STR,
            "selector": _STR,
            "output_path": _STR,
            "bytes_written": _INT,
            "digest": _HEX,
            "placements": {
                "type": "array",
                "items": _object({"label": _STR, "kind": _STR, "offset": _INT}),
            },
        },
    ),
    "stats": _document(
        "stats",
        {
            "unique_artifacts": _INT,
            "logical_bytes": _INT,
            "physical_bytes": _INT,
            "manifest_count": _INT,
            "dedup_ratio": _NUM,
        },
    ),
    "duplicates": _document(
        "duplicates",
        {
            "digest": _HEX,
            "count": _INT,
            "occurrences": {"type": "array", "items": _OCCURRENCE},
        },
    ),
    "audit": _document(
        "audit",
        {
            "clean": {"type": "boolean"},
            "blobs_checked": _INT,
            "manifests_checked": _INT,
            "violations": {
                "type": "array",
                "items": _object({"kind": _STR, "subject": _STR, "detail": _STR}),
            },
            "orphan_blobs": {"type": "array", "items": _HEX},
            "stale_temp_files": _INT,
        },
    ),
    "manifests": _document(
        "manifests", {"manifests": {"type": "array", "items": _SUMMARY}}
    ),
    "near": _document(
        "near",
        {
            "query": _STR,
            "threshold": {"type": "integer", "minimum": 0, "maximum": 100},
            "matches": {
                "type": "array",
                "items": _object(
                    {
                        "digest": _HEX,
                        "score": {"type": "integer", "minimum": 0, "maximum": 100},
                    }
                ),
            },
        },
    ),
    "reindex": _document("reindex", {"entries": _INT}),
    "fixture": _document(
        "fixture",
        {
            "image_path": _STR,
            "image_size": _INT,
            "partitions": {"type": "array"},
            "file_count": _INT,
            "file_bytes": _INT,
            "directories": {"type": "array", "items": _STR},
            "deleted": {"type": "array", "items": _STR},
            "modified": {"type": "array", "items": _STR},
        },
    ),
}
