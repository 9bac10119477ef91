#!/usr/bin/env python3
"""
Script to create sample disk images for trying dedup-acq.

This script creates, in one directory:
- base.img: a FAT32 system partition and a FAT16 data partition
- modified.img: base.img with half a percent of its files rewritten
- census.img: a small FAT16 volume holding many copies of a few files
- a JSON description next to every image, usable with ``dedup-acq mkimage``
"""

import argparse
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List

from dedupacq.errors import DedupAcqError
from dedupacq.tools.fixtures import build_test_image

MIB = 1024 * 1024


def system_partition() -> Dict[str, Any]:
    """A FAT32 volume laid out like a small installed system."""
    folders = ["/SYSTEM", "/PROGRAMS", "/USERS"]
    files: List[Dict[str, Any]] = []
    for k in range(10):
        files.append(
            {
                "path": f"/SYSTEM/lib{k}/mod{{n}}.dll",
                "count": 100,
                "size": 3000,
                "seed": 10_000 * (k + 1),
                "distinct": True,
            }
        )
        folders.append(f"/SYSTEM/lib{k}")
    files += [
        {"path": "/PROGRAMS/runtime{n}.bin", "count": 4, "size": 65_536, "seed": 3},
        {"path": "/USERS/notes.txt", "content": "case notes\n" * 400},
        {"path": "/USERS/photo.raw", "size": 200_000, "seed": 8, "fragment": True},
        {"path": "/USERS/draft.doc", "size": 12_000, "seed": 9},
    ]
    return {
        "variant": "FAT32",
        "size": 40 * MIB,
        "sectors_per_cluster": 1,
        "label": "SYSTEM",
        "directories": folders,
        "files": files,
        "delete": ["/USERS/draft.doc"],
    }


def data_partition() -> Dict[str, Any]:
    """A FAT16 volume with a few shared files and random free space."""
    return {
        "variant": "FAT16",
        "size": 16 * MIB,
        "sectors_per_cluster": 4,
        "label": "DATA",
        "fill_seed": 21,
        "directories": ["/EXPORT"],
        "files": [
            {"path": "/EXPORT/runtime.bin", "size": 65_536, "seed": 3},
            {"path": "/EXPORT/ledger{n}.csv", "count": 20, "size": 4000, "seed": 30},
        ],
    }


def base_spec() -> Dict[str, Any]:
    return {
        "seed": 1,
        "partitions": [system_partition(), data_partition()],
        "trailing_bytes": 64 * 1024,
    }


def modified_spec() -> Dict[str, Any]:
    spec = base_spec()
    spec["partitions"][0].update(modify_fraction=0.005, modify_seed=42)
    return spec


def census_spec() -> Dict[str, Any]:
    return {
        "seed": 2,
        "partitions": [
            {
                "variant": "FAT16",
                "size": 8 * MIB,
                "sectors_per_cluster": 1,
                "label": "CENSUS",
                "files": [
                    {"path": "/report{n}.pdf", "count": 50, "size": 9000, "seed": 4},
                    {"path": "/logo{n}.png", "count": 100, "size": 1200, "seed": 5},
                    {
                        "path": "/unique{n}.dat",
                        "count": 20,
                        "size": 2500,
                        "seed": 6,
                        "distinct": True,
                    },
                ],
            }
        ],
    }


SAMPLES = {
    "base": base_spec,
    "modified": modified_spec,
    "census": census_spec,
}


def create_sample_images(out_dir: Path) -> None:
    """Write every sample image and its description into ``out_dir``."""
    print(f"Creating sample images in: {out_dir}")
    for name, make_spec in SAMPLES.items():
        spec = make_spec()
        (out_dir / f"{name}.json").write_text(json.dumps(spec, indent=2))
        result = build_test_image(spec, out_dir / f"{name}.img")
        print(
            f"✓ {name}.img: {result.image_size} bytes, "
            f"{len(result.files)} files, {len(result.modified)} modified"
        )

    print(f"\n✅ Sample images created successfully in: {out_dir}")
    print("\nTry:")
    print(f"  dedup-acq acquire {out_dir}/base.img --root store \\")
    print("        --case-id DEMO --investigator-id me --disk-id base")
    print(f"  dedup-acq acquire {out_dir}/modified.img --root store \\")
    print("        --case-id DEMO --investigator-id me --disk-id modified")
    print(f"  dedup-acq inspect {out_dir}/census.img")


def main() -> int:
    """Main entry point."""
    parser = argparse.ArgumentParser(
        description="Create sample disk images for dedup-acq"
    )
    parser.add_argument(
        "path",
        nargs="?",
        default="./sample-images",
        help="Directory for the images (default: ./sample-images)",
    )
    parser.add_argument(
        "--temp", action="store_true", help="Create the images in a temporary directory"
    )

    args = parser.parse_args()

    if args.temp:
        out_dir = Path(tempfile.mkdtemp(prefix="dedupacq-sample-"))
    else:
        out_dir = Path(os.path.abspath(args.path))
        out_dir.mkdir(parents=True, exist_ok=True)

    try:
        create_sample_images(out_dir)
    except (DedupAcqError, OSError) as e:
        print(f"\n❌ Error creating images: {e}")
        return 1

    return 0


if __name__ == "__main__":
    exit(main())
