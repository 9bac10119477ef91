"""Subcommand handlers.

Each handler takes the parsed arguments and a :class:`CommandContext`, prints
one report to stdout and returns the process exit code.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional

from ..errors import ConfigError, NotFound
from ..models import (
    Digest,
    DuplicateReport,
    FuzzyDigest,
    ManifestListing,
    NearMatchReport,
    ReindexReport,
)
from ..services import (
    AcquisitionConfig,
    EvidenceStore,
    ReconstructionConfig,
    acquire,
    benchmark,
    extract_artifact,
    inspect,
    open_store,
    reconstruct,
    serve,
    verify_image,
)
from ..services.store import MAX_CHECK_BATCH
from ..tools.fixtures import build_test_image, load_fixture_spec
from ..tools.wire import DEFAULT_PORT
from .render import render_report

logger = logging.getLogger(__name__)

ENV_SERVER = "DEDUPACQ_SERVER"
ENV_ROOT = "DEDUPACQ_ROOT"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_VERIFICATION = 3

DEFAULT_LISTEN = f"0.0.0.0:{DEFAULT_PORT}"
DEFAULT_NEAR_THRESHOLD = 50


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """Settings from a JSON config file; keys are long flag names with
    dashes replaced by underscores."""
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


@dataclass
class CommandContext:
    root: Optional[Path] = None
    server: Optional[str] = None
    fmt: str = "table"
    verbosity: int = 0
    config_path: Optional[Path] = None
    settings: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_args(
        cls, args: argparse.Namespace, environ: Optional[Mapping[str, str]] = None
    ) -> "CommandContext":
        """Resolve globals: flag, then environment, then config file."""
        env = os.environ if environ is None else environ
        config_path = Path(args.config) if args.config else None
        settings = load_config_file(config_path)

        root = args.root
        server = args.server
        if root is None and server is None:
            root = env.get(ENV_ROOT) or None
            server = env.get(ENV_SERVER) or None
        if root is None and server is None:
            root = settings.get("root")
            server = settings.get("server")

        return cls(
            root=Path(root) if root else None,
            server=server or None,
            fmt=args.format or settings.get("format") or "table",
            verbosity=args.verbose,
            config_path=config_path,
            settings=settings,
        )

    def option(self, args: argparse.Namespace, name: str, default: Any = None) -> Any:
        """A subcommand option: the flag if given, else the config file."""
        value = getattr(args, name, None)
        if value is not None:
            return value
        return self.settings.get(name, default)

    def store_location(self) -> Dict[str, Any]:
        if (self.root is None) == (self.server is None):
            raise ConfigError(
                "Name exactly one evidence store with --root or --server "
                f"(or {ENV_ROOT} / {ENV_SERVER})"
            )
        return {"endpoint": self.server, "root": self.root}

    def local_store(self) -> EvidenceStore:
        if self.root is None:
            raise ConfigError("This command needs a local store: pass --root")
        if self.server is not None:
            raise ConfigError("Give --root or --server, not both")
        return EvidenceStore(self.root)

    def emit(
        self, report: Any, inventory: bool = False, failed: bool = False
    ) -> None:
        """Print a report; reports of failed checks go to stderr."""
        stream = sys.stderr if failed else sys.stdout
        print(render_report(report, self.fmt, inventory=inventory), file=stream)


def _digest_arg(text: str) -> Digest:
    try:
        return Digest.from_hex(text)
    except ValueError as e:
        raise ConfigError(f"Not a content digest: {text!r}") from e


def cmd_serve(args: argparse.Namespace, ctx: CommandContext) -> int:
    if ctx.root is None:
        raise ConfigError("serve needs a store root: pass --root")
    serve(
        ctx.root,
        ctx.option(args, "listen", DEFAULT_LISTEN),
        int(ctx.option(args, "max_check_batch", MAX_CHECK_BATCH)),
    )
    return EXIT_OK


def _acquisition_config(
    args: argparse.Namespace, ctx: CommandContext, **overrides: Any
) -> AcquisitionConfig:
    values: Dict[str, Any] = {
        "case_id": ctx.option(args, "case_id", ""),
        "investigator_id": ctx.option(args, "investigator_id", ""),
        "disk_id": ctx.option(args, "disk_id", ""),
        "compute_fuzzy": not ctx.option(args, "no_fuzzy", False),
    }
    for name, kind in (
        ("check_batch", int),
        ("hash_workers", int),
        ("upload_connections", int),
        ("max_artifact_size", int),
    ):
        value = ctx.option(args, name)
        if value is not None:
            values[name] = kind(value)
    buffer_mib = ctx.option(args, "buffer_mib")
    if buffer_mib is not None:
        values["buffer_bytes"] = int(buffer_mib) * 1024 * 1024
    values.update(overrides)
    return AcquisitionConfig(**values)


def cmd_acquire(args: argparse.Namespace, ctx: CommandContext) -> int:
    location = ctx.store_location()
    link_mbit = ctx.option(args, "link_mbit")
    config = _acquisition_config(
        args,
        ctx,
        endpoint=location["endpoint"],
        store_root=location["root"],
        link_mbit=float(link_mbit) if link_mbit else None,
    )
    ctx.emit(acquire(args.image, config))
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace, ctx: CommandContext) -> int:
    config = ReconstructionConfig(
        fetch_connections=int(ctx.option(args, "fetch_connections", 4)),
        sparse=not ctx.option(args, "no_sparse", False),
    )
    with open_store(**ctx.store_location()) as store:
        report = reconstruct(args.manifest_id, args.out, store, config)
    ctx.emit(report)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, ctx: CommandContext) -> int:
    with open_store(**ctx.store_location()) as store:
        manifest = store.get_manifest(args.manifest_id)
    result = verify_image(
        args.image,
        manifest,
        sample=int(ctx.option(args, "sample", 0)),
        seed=ctx.option(args, "seed"),
    )
    ctx.emit(result, failed=not result.passed)
    return EXIT_OK if result.passed else EXIT_VERIFICATION


def cmd_extract(args: argparse.Namespace, ctx: CommandContext) -> int:
    digest = _digest_arg(args.digest) if args.digest else None
    with open_store(**ctx.store_location()) as store:
        manifest = store.get_manifest(args.manifest_id)
        result = extract_artifact(manifest, args.out, store, args.path, digest)
    ctx.emit(result)
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, ctx: CommandContext) -> int:
    config = _acquisition_config(args, ctx)
    report = inspect(
        args.image,
        compute_fuzzy=config.compute_fuzzy,
        hash_workers=config.hash_workers,
        max_artifact_size=config.max_artifact_size,
    )
    ctx.emit(report, inventory=bool(args.inventory))
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, ctx: CommandContext) -> int:
    with open_store(**ctx.store_location()) as store:
        stats = store.store_stats()
    ctx.emit(stats)
    return EXIT_OK


def cmd_dupes(args: argparse.Namespace, ctx: CommandContext) -> int:
    digest = _digest_arg(args.digest)
    store = ctx.local_store()
    ctx.emit(DuplicateReport(digest.hex, store.query_duplicates(digest)))
    return EXIT_OK


def cmd_audit(args: argparse.Namespace, ctx: CommandContext) -> int:
    report = ctx.local_store().audit_store()
    ctx.emit(report, failed=not report.clean)
    return EXIT_OK if report.clean else EXIT_VERIFICATION


def cmd_manifests(args: argparse.Namespace, ctx: CommandContext) -> int:
    ctx.emit(ManifestListing(ctx.local_store().list_manifests()))
    return EXIT_OK


def cmd_near(args: argparse.Namespace, ctx: CommandContext) -> int:
    store = ctx.local_store()
    threshold = int(ctx.option(args, "threshold", DEFAULT_NEAR_THRESHOLD))
    if not 1 <= threshold <= 100:
        raise ConfigError(f"--threshold must be within 1..100, got {threshold}")

    query: Optional[FuzzyDigest]
    if ":" in args.query:
        try:
            query = FuzzyDigest.parse(args.query)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    else:
        query = store.fuzzy_index.get(_digest_arg(args.query))
        if query is None:
            raise NotFound(f"fuzzy digest of {args.query}")
    matches = store.near_matches(query, threshold)
    ctx.emit(NearMatchReport(args.query, threshold, matches))
    return EXIT_OK


def cmd_reindex(args: argparse.Namespace, ctx: CommandContext) -> int:
    ctx.emit(ReindexReport(ctx.local_store().rebuild_fuzzy_index()))
    return EXIT_OK


def cmd_mkimage(args: argparse.Namespace, ctx: CommandContext) -> int:
    result = build_test_image(load_fixture_spec(args.spec), args.out)
    ctx.emit(result)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, ctx: CommandContext) -> int:
    link_mbit = ctx.option(args, "link_mbit")
    report = benchmark(
        args.image,
        _acquisition_config(args, ctx),
        repetitions=int(ctx.option(args, "reps", 1)),
        mode=ctx.option(args, "mode", "direct"),
        link_mbit=float(link_mbit) if link_mbit else None,
    )
    ctx.emit(report)
    return EXIT_OK


Handler = Callable[[argparse.Namespace, CommandContext], int]

COMMANDS: Dict[str, Handler] = {
    "serve": cmd_serve,
    "acquire": cmd_acquire,
    "reconstruct": cmd_reconstruct,
    "verify": cmd_verify,
    "extract": cmd_extract,
    "inspect": cmd_inspect,
    "stats": cmd_stats,
    "dupes": cmd_dupes,
    "audit": cmd_audit,
    "manifests": cmd_manifests,
    "near": cmd_near,
    "reindex": cmd_reindex,
    "mkimage": cmd_mkimage,
    "bench": cmd_bench,
}
