"""Main module for dedup-acq functionality."""

import argparse
import logging
import sys
from typing import List, Optional

from rich.console import Console
from rich.logging import RichHandler

from .cli.commands import (
    COMMANDS,
    EXIT_FAILURE,
    EXIT_USAGE,
    EXIT_VERIFICATION,
    CommandContext,
)
from .cli.render import FORMATS
from .errors import ConfigError, DedupAcqError, VerificationFailed
from .services.acquisition import BENCHMARK_MODES

LOG_FORMAT = "%(name)s: %(message)s"


def configure_logging(verbosity: int = 0) -> None:
    """Send log records to stderr through rich; stdout carries reports only."""
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    handler = RichHandler(
        console=Console(stderr=True),
        show_path=verbosity >= 2,
        rich_tracebacks=verbosity >= 2,
    )
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger("dedupacq")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    """Options accepted both before and after the subcommand name."""
    parent = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    parent.add_argument(
        "--root", default=default, help="Local evidence store directory"
    )
    parent.add_argument(
        "--server", default=default, help="Evidence server endpoint HOST:PORT"
    )
    parent.add_argument(
        "--format",
        choices=FORMATS,
        default=default,
        help="Report format (default: table)",
    )
    parent.add_argument(
        "--config", default=default, help="JSON config file mirroring the flags"
    )
    parent.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=argparse.SUPPRESS if suppress else 0,
        help="-v for progress, -vv for debug detail",
    )
    return parent


def _acquisition_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--no-fuzzy",
        action="store_true",
        default=None,
        help="Skip fuzzy digests of file contents",
    )
    parser.add_argument("--hash-workers", type=int, help="Parallel hash workers")
    parser.add_argument(
        "--max-artifact-size", type=int, help="Split larger files into pieces"
    )


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments.

    Returns:
        Parsed arguments namespace.
    """
    parser = argparse.ArgumentParser(
        prog="dedup-acq",
        description="dedup-acq: deduplicated forensic acquisition of disk images",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[_global_options(suppress=False)],
        epilog="""
Examples:
  %(prog)s serve --root /srv/evidence --listen 0.0.0.0:7311
  %(prog)s acquire disk.img --server lab:7311 --case-id C1 \\
        --investigator-id I7 --disk-id D42
  %(prog)s reconstruct MANIFEST_ID --out rebuilt.img --server lab:7311
  %(prog)s verify rebuilt.img --manifest-id MANIFEST_ID --server lab:7311
  %(prog)s inspect disk.img --format json
  %(prog)s stats --root /srv/evidence
  %(prog)s mkimage fixture.json --out disk.img
  %(prog)s bench disk.img --reps 3 --mode loopback

Exit codes: 0 success, 1 operational error, 2 usage error,
3 verification failure.
        """,
    )
    common = _global_options(suppress=True)
    subparsers = parser.add_subparsers(
        dest="command", required=True, help="Available commands"
    )

    serve_parser = subparsers.add_parser(
        "serve", parents=[common], help="Run the evidence store server"
    )
    serve_parser.add_argument(
        "--listen", help="Listen address HOST:PORT (default: 0.0.0.0:7311)"
    )
    serve_parser.add_argument(
        "--max-check-batch", type=int, help="Largest accepted CHECK batch"
    )

    acquire_parser = subparsers.add_parser(
        "acquire", parents=[common], help="Acquire an image into the store"
    )
    acquire_parser.add_argument("image", help="Raw disk image file")
    acquire_parser.add_argument("--case-id", help="Case identifier")
    acquire_parser.add_argument("--investigator-id", help="Investigator identifier")
    acquire_parser.add_argument("--disk-id", help="Disk identifier")
    acquire_parser.add_argument(
        "--check-batch", type=int, help="Digests per CHECK request (max 512)"
    )
    acquire_parser.add_argument(
        "--upload-connections", type=int, help="Parallel upload connections"
    )
    acquire_parser.add_argument(
        "--link-mbit", type=float, help="Throttle the link to this many Mbit/s"
    )
    acquire_parser.add_argument(
        "--buffer-mib",
        type=int,
        help="Payload memory before spilling to a temporary file",
    )
    _acquisition_options(acquire_parser)

    reconstruct_parser = subparsers.add_parser(
        "reconstruct", parents=[common], help="Rebuild an image from a manifest"
    )
    reconstruct_parser.add_argument("manifest_id", help="Manifest identifier")
    reconstruct_parser.add_argument("--out", required=True, help="Output image")
    reconstruct_parser.add_argument(
        "--fetch-connections", type=int, help="Parallel fetch connections"
    )
    reconstruct_parser.add_argument(
        "--no-sparse",
        action="store_true",
        default=None,
        help="Write zeros instead of staging a sparse file",
    )

    verify_parser = subparsers.add_parser(
        "verify", parents=[common], help="Verify an image against a manifest"
    )
    verify_parser.add_argument("image", help="Image file to verify")
    verify_parser.add_argument(
        "--manifest-id", required=True, help="Manifest identifier"
    )
    verify_parser.add_argument(
        "--sample", type=int, help="Also re-hash this many random artifacts"
    )
    verify_parser.add_argument("--seed", type=int, help="Sampling seed")

    extract_parser = subparsers.add_parser(
        "extract", parents=[common], help="Extract one artifact from the store"
    )
    extract_parser.add_argument("manifest_id", help="Manifest identifier")
    selector = extract_parser.add_mutually_exclusive_group(required=True)
    selector.add_argument("--path", help="File path inside the image")
    selector.add_argument("--digest", help="Content digest (hex)")
    extract_parser.add_argument("--out", required=True, help="Output file")

    inspect_parser = subparsers.add_parser(
        "inspect", parents=[common], help="Enumerate and hash an image locally"
    )
    inspect_parser.add_argument("image", help="Raw disk image file")
    inspect_parser.add_argument(
        "--inventory", action="store_true", help="List every artifact"
    )
    _acquisition_options(inspect_parser)

    subparsers.add_parser("stats", parents=[common], help="Store statistics")

    dupes_parser = subparsers.add_parser(
        "dupes", parents=[common], help="Where a digest occurs across acquisitions"
    )
    dupes_parser.add_argument("digest", help="Content digest (hex)")

    subparsers.add_parser("audit", parents=[common], help="Check store integrity")
    subparsers.add_parser(
        "manifests", parents=[common], help="List acquisitions in commit order"
    )

    near_parser = subparsers.add_parser(
        "near", parents=[common], help="Find approximately matching file contents"
    )
    near_parser.add_argument(
        "query", metavar="DIGEST", help="Content digest or fuzzy digest"
    )
    near_parser.add_argument(
        "--threshold", type=int, help="Minimum score 1..100 (default: 50)"
    )

    subparsers.add_parser(
        "reindex", parents=[common], help="Rebuild the fuzzy index from blobs"
    )

    mkimage_parser = subparsers.add_parser(
        "mkimage", parents=[common], help="Build a fixture image from a JSON spec"
    )
    mkimage_parser.add_argument("spec", help="Fixture description (JSON)")
    mkimage_parser.add_argument("--out", required=True, help="Output image")

    bench_parser = subparsers.add_parser(
        "bench", parents=[common], help="Time initial acquisition and re-acquisition"
    )
    bench_parser.add_argument("image", help="Raw disk image file")
    bench_parser.add_argument("--reps", type=int, help="Repetitions (default: 1)")
    bench_parser.add_argument(
        "--mode", choices=BENCHMARK_MODES, help="Store access (default: direct)"
    )
    bench_parser.add_argument(
        "--link-mbit", type=float, help="Throttle the loopback link (Mbit/s)"
    )
    _acquisition_options(bench_parser)

    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application."""
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    configure_logging(args.verbose)
    try:
        ctx = CommandContext.from_args(args)
        return COMMANDS[args.command](args, ctx)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailed as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_VERIFICATION
    except (DedupAcqError, OSError) as e:
        logging.getLogger(__name__).debug("Command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("Interrupted.", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
