"""Deterministic MBR + FAT16/FAT32 test image generator.

A fixture description lists partitions, the files and directories on each
volume, and the deletions and in-place modifications applied after the
files were written. ``build_test_image`` writes the image (sparse where the
platform allows) and returns the ground truth needed by oracle checks.
"""

import json
import logging
import math
import random
import re
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import (
    Any,
    BinaryIO,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

from ..errors import CapacityError, FixtureError
from ..models.image import parse_timestamp
from .fat import (
    ATTR_DIRECTORY,
    ATTR_VOLUME_ID,
    DELETED_MARK,
    DIR_ENTRY,
    DIR_ENTRY_SIZE,
    FAT12_MAX_CLUSTERS,
    FAT16_MAX_CLUSTERS,
    LFN_LAST,
    NT_LOWER_BASE,
    NT_LOWER_EXT,
    SECTOR_SIZE,
    lfn_checksum,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMESTAMP = "2017-03-14T09:26:52Z"
DEFAULT_FIRST_LBA = 2048
PARTITION_ALIGN = 2048
ATTR_ARCHIVE = 0x20
MEDIA_FIXED = 0xF8
FILL_CHUNK = 1024 * 1024

FAT_TYPE_FOR = {"FAT16": 0x0E, "FAT32": 0x0C}
DEFAULT_RAW_TYPE = 0x83

_SHORT_CHARS = re.compile(r"^[A-Z0-9!#$%&'()\-@^_`{}~]+$")


@dataclass
class FileSpec:
    path: str
    content: Optional[bytes] = None
    size: int = 0
    seed: int = 0
    fragment: bool = False
    clusters: Optional[List[int]] = None
    timestamp: Optional[datetime] = None

    def data(self) -> bytes:
        if self.content is not None:
            return self.content
        return random.Random(self.seed).randbytes(self.size)


@dataclass
class ModifySpec:
    path: str
    seed: int = 0
    touch: bool = False


@dataclass
class PartitionSpec:
    variant: str = "FAT16"
    size: int = 16 * 1024 * 1024
    start_lba: Optional[int] = None
    bytes_per_sector: int = 512
    sectors_per_cluster: int = 8
    root_entries: int = 512
    label: Optional[str] = None
    type_code: Optional[int] = None
    fill_seed: Optional[int] = None
    files: List[FileSpec] = field(default_factory=list)
    directories: List[str] = field(default_factory=list)
    delete: List[str] = field(default_factory=list)
    modify: List[ModifySpec] = field(default_factory=list)
    modify_fraction: float = 0.0
    modify_seed: int = 0

    @property
    def is_fat(self) -> bool:
        return self.variant in FAT_TYPE_FOR


@dataclass
class FixtureSpec:
    partitions: List[PartitionSpec]
    seed: int = 0
    timestamp: datetime = field(
        default_factory=lambda: parse_timestamp(DEFAULT_TIMESTAMP)
    )
    image_size: Optional[int] = None
    trailing_bytes: int = 0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FixtureSpec":
        try:
            return _spec_from_dict(data)
        except (KeyError, TypeError, ValueError) as e:
            raise FixtureError(f"Invalid fixture description: {e}") from e


def _file_specs(
    raw: Mapping[str, Any], default_ts: Optional[datetime]
) -> List[FileSpec]:
    content = raw.get("content")
    if isinstance(content, str):
        content = content.encode("utf-8")
    timestamp = default_ts
    if raw.get("timestamp"):
        timestamp = parse_timestamp(raw["timestamp"])
    count = int(raw.get("count", 1))
    distinct = bool(raw.get("distinct", False))
    seed = int(raw.get("seed", 0))
    specs = []
    for n in range(count):
        path = raw["path"]
        if count > 1 or "{n" in path:
            path = path.format(n=n)
        specs.append(
            FileSpec(
                path=path,
                content=content,
                size=int(raw.get("size", 0)),
                seed=seed + n if distinct else seed,
                fragment=bool(raw.get("fragment", False)),
                clusters=list(raw["clusters"]) if raw.get("clusters") else None,
                timestamp=timestamp,
            )
        )
    return specs


def _modify_spec(raw: Union[str, Mapping[str, Any]]) -> ModifySpec:
    if isinstance(raw, str):
        return ModifySpec(raw)
    return ModifySpec(
        raw["path"], int(raw.get("seed", 0)), bool(raw.get("touch", False))
    )


def _spec_from_dict(data: Mapping[str, Any]) -> FixtureSpec:
    timestamp = parse_timestamp(data.get("timestamp", DEFAULT_TIMESTAMP))
    partitions = []
    for raw in data["partitions"]:
        files = [f for entry in raw.get("files", []) for f in _file_specs(entry, None)]
        modify = [_modify_spec(m) for m in raw.get("modify", [])]
        partitions.append(
            PartitionSpec(
                variant=raw.get("variant", "FAT16"),
                size=int(raw["size"]),
                start_lba=raw.get("start_lba"),
                bytes_per_sector=int(raw.get("bytes_per_sector", 512)),
                sectors_per_cluster=int(raw.get("sectors_per_cluster", 8)),
                root_entries=int(raw.get("root_entries", 512)),
                label=raw.get("label"),
                type_code=raw.get("type_code"),
                fill_seed=raw.get("fill_seed"),
                files=files,
                directories=list(raw.get("directories", [])),
                delete=list(raw.get("delete", [])),
                modify=modify,
                modify_fraction=float(raw.get("modify_fraction", 0.0)),
                modify_seed=int(raw.get("modify_seed", 0)),
            )
        )
    return FixtureSpec(
        partitions=partitions,
        seed=int(data.get("seed", 0)),
        timestamp=timestamp,
        image_size=data.get("image_size"),
        trailing_bytes=int(data.get("trailing_bytes", 0)),
    )


def load_fixture_spec(path: Union[str, Path]) -> FixtureSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FixtureError(f"{path}: not valid JSON: {e}") from e
    return FixtureSpec.from_dict(data)


@dataclass(frozen=True)
class FileTruth:
    path: str
    content: bytes
    cluster_chain: Tuple[int, ...]
    partition: int


@dataclass(frozen=True)
class PartitionTruth:
    index: int
    variant: str
    start_lba: int
    sector_count: int
    cluster_size: int
    cluster_count: int


@dataclass
class FixtureResult:
    """Ground truth recorded while writing a fixture image."""

    image_path: Path
    image_size: int
    partitions: List[PartitionTruth]
    files: List[FileTruth]
    directories: List[str] = field(default_factory=list)
    deleted: List[str] = field(default_factory=list)
    modified: List[str] = field(default_factory=list)

    def file(self, path: str, partition: int = 0) -> FileTruth:
        for truth in self.files:
            if truth.path == path and truth.partition == partition:
                return truth
        raise KeyError(path)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_path": str(self.image_path),
            "image_size": self.image_size,
            "partitions": [asdict(p) for p in self.partitions],
            "file_count": len(self.files),
            "file_bytes": sum(len(f.content) for f in self.files),
            "directories": list(self.directories),
            "deleted": list(self.deleted),
            "modified": list(self.modified),
        }


def fat_date_time(value: datetime) -> Tuple[int, int]:
    value = value.astimezone(timezone.utc)
    date = ((value.year - 1980) << 9) | (value.month << 5) | value.day
    time = (value.hour << 11) | (value.minute << 5) | (value.second // 2)
    return date, time


def _split_name(name: str) -> Tuple[str, str]:
    if "." in name.lstrip("."):
        stem, _, ext = name.rpartition(".")
        return stem, ext
    return name, ""


def _plain_short_name(name: str) -> Optional[Tuple[bytes, int]]:
    """8.3 form and NT case flags when ``name`` needs no long-name entries."""
    stem, ext = _split_name(name)
    if not 1 <= len(stem) <= 8 or len(ext) > 3:
        return None
    flags = 0
    for part, flag in ((stem, NT_LOWER_BASE), (ext, NT_LOWER_EXT)):
        if part and part == part.lower() and part != part.upper():
            flags |= flag
        elif part != part.upper():
            return None
    upper_stem, upper_ext = stem.upper(), ext.upper()
    if not _SHORT_CHARS.match(upper_stem):
        return None
    if upper_ext and not _SHORT_CHARS.match(upper_ext):
        return None
    return (upper_stem.ljust(8) + upper_ext.ljust(3)).encode("ascii"), flags


def _generated_short_name(name: str, taken: Set[bytes]) -> bytes:
    stem, ext = _split_name(name)

    def clean(text: str) -> str:
        return "".join(c for c in text.upper() if _SHORT_CHARS.match(c)) or "_"

    base, short_ext = clean(stem)[:6], clean(ext)[:3] if ext else ""
    for n in range(1, 1_000_000):
        tail = f"~{n}"
        candidate = (base[: 8 - len(tail)] + tail).ljust(8) + short_ext.ljust(3)
        raw = candidate.encode("ascii")
        if raw not in taken:
            return raw
    raise FixtureError(f"Cannot derive a short name for {name!r}")


def _lfn_entries(name: str, checksum: int) -> List[bytes]:
    """Long-name entries in on-disk order (highest sequence first)."""
    units = name.encode("utf-16-le")
    chars = [units[i : i + 2] for i in range(0, len(units), 2)]
    if len(chars) > 255:
        raise FixtureError(f"Long name too long: {name!r}")
    count = math.ceil(len(chars) / 13)
    if len(chars) % 13:
        chars.append(b"\x00\x00")
    chars.extend([b"\xff\xff"] * (count * 13 - len(chars)))
    entries = []
    for seq in range(count, 0, -1):
        part = chars[(seq - 1) * 13 : seq * 13]
        order = seq | (LFN_LAST if seq == count else 0)
        entries.append(
            bytes([order])
            + b"".join(part[0:5])
            + bytes([0x0F, 0, checksum])
            + b"".join(part[5:11])
            + b"\x00\x00"
            + b"".join(part[11:13])
        )
    return entries


class _Node:
    def __init__(
        self,
        name: str,
        is_dir: bool,
        parent: Optional["_Node"],
        timestamp: datetime,
    ):
        self.name = name
        self.is_dir = is_dir
        self.parent = parent
        self.created = timestamp
        self.modified = timestamp
        self.children: Dict[str, "_Node"] = {}
        self.order: List["_Node"] = []
        self.chain: List[int] = []
        self.content = b""
        self.short = b""
        self.nt_flags = 0
        self.long_name = False
        self.deleted = False

    @property
    def path(self) -> str:
        if self.parent is None:
            return "/"
        return f"{self.parent.path.rstrip('/')}/{self.name}"


class _VolumeBuilder:
    """Lays out one FAT volume in memory, then writes it to the image."""

    def __init__(
        self, spec: PartitionSpec, start_lba: int, index: int, timestamp: datetime
    ):
        self.spec = spec
        self.index = index
        self.start_lba = start_lba
        self.timestamp = timestamp
        bps, spc = spec.bytes_per_sector, spec.sectors_per_cluster
        if bps not in (512, 1024, 2048, 4096):
            raise FixtureError(f"bytes_per_sector {bps} not supported")
        if spc not in tuple(1 << n for n in range(8)):
            raise FixtureError(
                f"sectors_per_cluster {spc} is not a power of two <= 128"
            )
        if spec.size % bps:
            raise FixtureError(f"Partition size {spec.size} is not a multiple of {bps}")

        self.fat32 = spec.variant == "FAT32"
        self.bps, self.spc = bps, spc
        self.cluster_size = bps * spc
        self.total_sectors = spec.size // bps
        self.reserved = 32 if self.fat32 else 1
        self.root_entries = 0 if self.fat32 else spec.root_entries
        if (self.root_entries * DIR_ENTRY_SIZE) % bps:
            raise FixtureError("root_entries must fill whole sectors")
        self.root_sectors = self.root_entries * DIR_ENTRY_SIZE // bps
        self.fat_size, self.cluster_count = self._geometry()
        self.eoc = 0x0FFFFFFF if self.fat32 else 0xFFFF

        limit_low = FAT16_MAX_CLUSTERS + 1 if self.fat32 else FAT12_MAX_CLUSTERS + 1
        limit_high = 0x0FFFFFF4 if self.fat32 else FAT16_MAX_CLUSTERS
        if not limit_low <= self.cluster_count <= limit_high:
            raise FixtureError(
                f"{spec.variant} needs {limit_low}..{limit_high} clusters; "
                f"{spec.size} bytes at {self.cluster_size}-byte clusters gives "
                f"{self.cluster_count}"
            )

        self.fat = [0] * (self.cluster_count + 2)
        self.fat[0] = (0x0FFFFF00 if self.fat32 else 0xFF00) | MEDIA_FIXED
        self.fat[1] = self.eoc
        self.used = bytearray(self.cluster_count + 2)
        self.used[0] = self.used[1] = 1
        self.reserved_clusters: Set[int] = set()
        self.cursor = 2

        self.root = _Node("", True, None, timestamp)
        if self.fat32:
            self.root.chain = self._allocate(1)
        self.deleted: List[str] = []
        self.modified: List[str] = []

    def _geometry(self) -> Tuple[int, int]:
        entry_size = 4 if self.fat32 else 2
        fat_size = 1
        while True:
            data_sectors = (
                self.total_sectors
                - self.reserved
                - 2 * fat_size
                - self.root_sectors
            )
            if data_sectors < self.spc:
                raise CapacityError(f"Partition of {self.spec.size} bytes is too small")
            clusters = data_sectors // self.spc
            needed = math.ceil((clusters + 2) * entry_size / self.bps)
            if needed <= fat_size:
                return fat_size, clusters
            fat_size = needed

    @property
    def max_cluster(self) -> int:
        return self.cluster_count + 1

    @property
    def data_start_sector(self) -> int:
        return self.reserved + 2 * self.fat_size + self.root_sectors

    def cluster_offset(self, cluster: int) -> int:
        return (
            self.start_lba * SECTOR_SIZE
            + self.data_start_sector * self.bps
            + (cluster - 2) * self.cluster_size
        )

    def reserve(self, clusters: Sequence[int]) -> None:
        for cluster in clusters:
            if not 2 <= cluster <= self.max_cluster:
                raise FixtureError(f"Cluster {cluster} outside 2..{self.max_cluster}")
            if cluster in self.reserved_clusters:
                raise FixtureError(f"Cluster {cluster} requested twice")
            self.reserved_clusters.add(cluster)

    def _link(self, chain: Sequence[int]) -> None:
        for cur, nxt in zip(chain, chain[1:]):
            self.fat[cur] = nxt
        self.fat[chain[-1]] = self.eoc
        for cluster in chain:
            self.used[cluster] = 1

    def _allocate(
        self,
        count: int,
        fragment: bool = False,
        explicit: Optional[Sequence[int]] = None,
    ) -> List[int]:
        if explicit is not None:
            if len(explicit) < count:
                raise FixtureError(f"{len(explicit)} clusters given, {count} needed")
            for cluster in explicit:
                if self.used[cluster]:
                    raise FixtureError(f"Cluster {cluster} already in use")
            chain = list(explicit)
        else:
            chain = []
            skip = False
            cluster = self.cursor
            while len(chain) < count:
                if cluster > self.max_cluster:
                    raise CapacityError(
                        f"Volume {self.index} is full ({self.cluster_count} clusters)"
                    )
                if not self.used[cluster] and cluster not in self.reserved_clusters:
                    if not skip:
                        chain.append(cluster)
                    skip = fragment and not skip
                cluster += 1
        if chain:
            self._link(chain)
        while self.cursor <= self.max_cluster and self.used[self.cursor]:
            self.cursor += 1
        return chain

    def _free(self, chain: Sequence[int]) -> None:
        for cluster in chain:
            self.fat[cluster] = 0
            self.used[cluster] = 0
        if chain:
            self.cursor = min(self.cursor, min(chain))

    def _lookup(self, path: str) -> _Node:
        node = self.root
        for part in _components(path):
            child = node.children.get(part.upper())
            if child is None or child.deleted:
                raise FixtureError(f"No such path on volume {self.index}: {path}")
            node = child
        return node

    def _add_child(
        self, parent: _Node, name: str, is_dir: bool, timestamp: datetime
    ) -> _Node:
        if name.upper() in parent.children:
            raise FixtureError(f"Duplicate entry {name!r} in {parent.path}")
        node = _Node(name, is_dir, parent, timestamp)
        taken = {c.short for c in parent.order}
        plain = _plain_short_name(name)
        if plain is not None and plain[0] not in taken:
            node.short, node.nt_flags = plain
        else:
            node.short = _generated_short_name(name, taken)
            node.long_name = True
        parent.children[name.upper()] = node
        parent.order.append(node)
        return node

    def mkdir(self, path: str) -> _Node:
        node = self.root
        for part in _components(path):
            child = node.children.get(part.upper())
            if child is None:
                child = self._add_child(node, part, True, self.timestamp)
                child.chain = self._allocate(1)
            elif not child.is_dir:
                raise FixtureError(f"{child.path} is a file, not a directory")
            node = child
        return node

    def add_file(self, spec: FileSpec) -> None:
        parts = _components(spec.path)
        if not parts:
            raise FixtureError(f"Invalid file path {spec.path!r}")
        parent = self.mkdir("/".join(parts[:-1]))
        node = self._add_child(
            parent, parts[-1], False, spec.timestamp or self.timestamp
        )
        node.content = spec.data()
        needed = math.ceil(len(node.content) / self.cluster_size)
        if spec.clusters is not None:
            node.chain = self._allocate(needed, explicit=spec.clusters)
        else:
            node.chain = self._allocate(needed, fragment=spec.fragment)

    def delete(self, path: str) -> None:
        node = self._lookup(path)
        if node.is_dir:
            raise FixtureError(f"Only files can be deleted: {path}")
        node.deleted = True
        self._free(node.chain)
        self.deleted.append(node.path)

    def modify(self, path: str, seed: int, touch: bool = False) -> None:
        node = self._lookup(path)
        if node.is_dir or not node.content:
            raise FixtureError(f"Only non-empty files can be modified: {path}")
        node.content = random.Random(seed).randbytes(len(node.content))
        if touch:
            node.modified = node.modified + timedelta(days=1)
        self.modified.append(node.path)

    def nodes(self) -> List[_Node]:
        """Every entry below the root, depth-first, deleted ones included."""
        found: List[_Node] = []

        def walk(node: _Node) -> None:
            for child in node.order:
                found.append(child)
                if child.is_dir:
                    walk(child)

        walk(self.root)
        return found

    def live_files(self) -> List[_Node]:
        return [n for n in self.nodes() if not n.is_dir and not n.deleted]

    def directories(self) -> List[_Node]:
        return [n for n in self.nodes() if n.is_dir]

    def _entry(
        self,
        node: _Node,
        name11: Optional[bytes] = None,
        cluster: Optional[int] = None,
    ) -> bytes:
        crt_date, crt_time = fat_date_time(node.created)
        wrt_date, wrt_time = fat_date_time(node.modified)
        first = (node.chain[0] if node.chain else 0) if cluster is None else cluster
        return DIR_ENTRY.pack(
            name11 or node.short,
            ATTR_DIRECTORY if node.is_dir else ATTR_ARCHIVE,
            node.nt_flags if name11 is None else 0,
            0,
            crt_time,
            crt_date,
            wrt_date,
            first >> 16,
            wrt_time,
            wrt_date,
            first & 0xFFFF,
            0 if node.is_dir else len(node.content),
        )

    def _directory_bytes(self, directory: _Node) -> bytes:
        entries: List[bytes] = []
        if directory.parent is None:
            if self.spec.label:
                label = self.spec.label.upper()[:11].ljust(11).encode("ascii")
                date, time = fat_date_time(self.timestamp)
                entries.append(
                    DIR_ENTRY.pack(
                        label, ATTR_VOLUME_ID, 0, 0, 0, 0, 0, 0, time, date, 0, 0
                    )
                )
        else:
            parent = directory.parent
            parent_cluster = parent.chain[0] if parent.parent is not None else 0
            entries.append(self._entry(directory, b".          "))
            entries.append(self._entry(parent, b"..         ", cluster=parent_cluster))
        for child in directory.order:
            run = []
            if child.long_name:
                run.extend(_lfn_entries(child.name, lfn_checksum(child.short)))
            run.append(self._entry(child))
            if child.deleted:
                run = [bytes([DELETED_MARK]) + e[1:] for e in run]
            entries.extend(run)
        return b"".join(entries)

    def finalize(self) -> List[Tuple[List[int], bytes]]:
        """Grow directories to fit their entries; returns each directory's
        chain and bytes (an empty chain is the FAT16 root region)."""
        layouts: List[Tuple[List[int], bytes]] = []
        for directory in [self.root] + self.directories():
            data = self._directory_bytes(directory)
            if directory.parent is None and not self.fat32:
                capacity = self.root_entries * DIR_ENTRY_SIZE
                if len(data) > capacity:
                    raise CapacityError(
                        f"Root directory holds {self.root_entries} entries, "
                        f"{len(data) // DIR_ENTRY_SIZE} needed"
                    )
                layouts.append(([], data))
                continue
            needed = max(1, math.ceil(len(data) / self.cluster_size))
            if needed > len(directory.chain):
                extra = self._allocate(needed - len(directory.chain))
                directory.chain.extend(extra)
                self._link(directory.chain)
            layouts.append((directory.chain, data))
        return layouts

    def apply_modifications(self) -> None:
        for path in self.spec.delete:
            self.delete(path)
        for mod in self.spec.modify:
            self.modify(mod.path, mod.seed, mod.touch)
        if self.spec.modify_fraction:
            candidates = sorted(
                (
                    n
                    for n in self.live_files()
                    if n.content and n.path not in self.modified
                ),
                key=lambda n: n.path,
            )
            count = round(self.spec.modify_fraction * len(candidates))
            rng = random.Random(self.spec.modify_seed)
            for node in rng.sample(candidates, count):
                self.modify(node.path, rng.getrandbits(32))

    def boot_sector(self) -> bytes:
        sector = bytearray(self.bps)
        total16 = 0
        if not self.fat32 and self.total_sectors < 0x10000:
            total16 = self.total_sectors
        struct.pack_into(
            "<3s8sHBHBHHBHHHII",
            sector,
            0,
            b"\xeb\x58\x90" if self.fat32 else b"\xeb\x3c\x90",
            b"MSWIN4.1",
            self.bps,
            self.spc,
            self.reserved,
            2,
            self.root_entries,
            total16,
            MEDIA_FIXED,
            0 if self.fat32 else self.fat_size,
            63,
            255,
            self.start_lba,
            0 if total16 else self.total_sectors,
        )
        label = (self.spec.label or "NO NAME").upper()[:11].ljust(11).encode("ascii")
        volume_id = (self.start_lba * 2654435761) & 0xFFFFFFFF
        if self.fat32:
            struct.pack_into(
                "<IHHIHH12xBBBI11s8s",
                sector,
                36,
                self.fat_size,
                0,
                0,
                self.root.chain[0],
                1,
                6,
                0x80,
                0,
                0x29,
                volume_id,
                label,
                b"FAT32   ",
            )
        else:
            struct.pack_into(
                "<BBBI11s8s", sector, 36, 0x80, 0, 0x29, volume_id, label, b"FAT16   "
            )
        sector[510:512] = b"\x55\xaa"
        return bytes(sector)

    def fs_info(self) -> bytes:
        sector = bytearray(self.bps)
        free = self.cluster_count - sum(self.used[2:])
        struct.pack_into("<I", sector, 0, 0x41615252)
        struct.pack_into("<IIII", sector, 484, 0x61417272, free, self.cursor, 0)
        struct.pack_into("<I", sector, 508, 0xAA550000)
        return bytes(sector)

    def write(self, fp: BinaryIO) -> None:
        layouts = self.finalize()
        base = self.start_lba * SECTOR_SIZE
        fp.seek(base)
        fp.write(self.boot_sector())
        if self.fat32:
            fp.seek(base + self.bps)
            fp.write(self.fs_info())
            fp.seek(base + 6 * self.bps)
            fp.write(self.boot_sector())
            fp.write(self.fs_info())

        fmt = "<{}I" if self.fat32 else "<{}H"
        table = struct.pack(fmt.format(len(self.fat)), *self.fat)
        for copy in range(2):
            fp.seek(base + (self.reserved + copy * self.fat_size) * self.bps)
            fp.write(table)

        if self.spec.fill_seed is not None:
            rng = random.Random(self.spec.fill_seed)
            for cluster in range(2, self.max_cluster + 1):
                if not self.used[cluster]:
                    fp.seek(self.cluster_offset(cluster))
                    fp.write(rng.randbytes(self.cluster_size))

        # deleted content first: directory growth may have reused its clusters
        deleted = [n for n in self.nodes() if n.deleted]
        for node in deleted + self.live_files():
            self._write_chain(fp, node.chain, node.content)

        for chain, data in layouts:
            if chain:
                self._write_chain(fp, chain, data)
            else:
                fp.seek(base + (self.reserved + 2 * self.fat_size) * self.bps)
                fp.write(data)

    def _write_chain(self, fp: BinaryIO, chain: Sequence[int], data: bytes) -> None:
        cs = self.cluster_size
        for i, cluster in enumerate(chain):
            piece = data[i * cs : (i + 1) * cs]
            if not piece:
                break
            fp.seek(self.cluster_offset(cluster))
            fp.write(piece)


def _components(path: str) -> List[str]:
    return [p for p in path.replace("\\", "/").split("/") if p]


def build_test_image(
    spec: Union[FixtureSpec, Mapping[str, Any]], out_path: Union[str, Path]
) -> FixtureResult:
    """Write the image described by ``spec`` to ``out_path``."""
    if not isinstance(spec, FixtureSpec):
        spec = FixtureSpec.from_dict(spec)
    if not spec.partitions:
        raise FixtureError("A fixture needs at least one partition")
    if len(spec.partitions) > 4:
        raise FixtureError("An MBR holds at most four partitions")

    placements: List[Tuple[int, int]] = []
    next_lba = DEFAULT_FIRST_LBA
    for part in spec.partitions:
        if part.size <= 0 or part.size % SECTOR_SIZE:
            raise FixtureError(
                f"Partition size {part.size} is not a positive multiple of 512"
            )
        start = part.start_lba if part.start_lba is not None else next_lba
        sectors = part.size // SECTOR_SIZE
        for other_start, other_count in placements:
            if start < other_start + other_count and other_start < start + sectors:
                raise FixtureError(f"Partition at LBA {start} overlaps another")
        if start < 1:
            raise FixtureError("Partitions must start after sector 0")
        placements.append((start, sectors))
        end = start + sectors
        next_lba = math.ceil(end / PARTITION_ALIGN) * PARTITION_ALIGN

    last_end = max(s + n for s, n in placements) * SECTOR_SIZE
    image_size = max(spec.image_size or 0, last_end + spec.trailing_bytes)

    builders: List[Optional[_VolumeBuilder]] = []
    for index, (part, (start, _)) in enumerate(zip(spec.partitions, placements)):
        if not part.is_fat:
            if part.variant != "raw":
                raise FixtureError(f"Unknown partition variant {part.variant!r}")
            builders.append(None)
            continue
        builder = _VolumeBuilder(part, start, index, spec.timestamp)
        for file_spec in part.files:
            if file_spec.clusters:
                builder.reserve(file_spec.clusters)
        for directory in part.directories:
            builder.mkdir(directory)
        for file_spec in part.files:
            builder.add_file(file_spec)
        builder.apply_modifications()
        builders.append(builder)

    rng = random.Random(spec.seed)
    mbr = bytearray(SECTOR_SIZE)
    mbr[440:444] = rng.randbytes(4)
    for index, (part, (start, sectors)) in enumerate(zip(spec.partitions, placements)):
        type_code = part.type_code or FAT_TYPE_FOR.get(part.variant, DEFAULT_RAW_TYPE)
        struct.pack_into(
            "<B3sB3sII",
            mbr,
            446 + 16 * index,
            0x80 if index == 0 else 0x00,
            b"\xfe\xff\xff",
            type_code,
            b"\xfe\xff\xff",
            start,
            sectors,
        )
    mbr[510:512] = b"\x55\xaa"

    out_path = Path(out_path)
    with open(out_path, "wb") as fp:
        fp.truncate(image_size)
        fp.write(bytes(mbr))
        for part, (start, sectors), builder in zip(
            spec.partitions, placements, builders
        ):
            if builder is not None:
                builder.write(fp)
            elif part.fill_seed is not None:
                fill = random.Random(part.fill_seed)
                fp.seek(start * SECTOR_SIZE)
                remaining = sectors * SECTOR_SIZE
                while remaining:
                    take = min(FILL_CHUNK, remaining)
                    fp.write(fill.randbytes(take))
                    remaining -= take

    result = FixtureResult(
        image_path=out_path, image_size=image_size, partitions=[], files=[]
    )
    for index, (part, (start, sectors), builder) in enumerate(
        zip(spec.partitions, placements, builders)
    ):
        result.partitions.append(
            PartitionTruth(
                index=index,
                variant=part.variant,
                start_lba=start,
                sector_count=sectors,
                cluster_size=builder.cluster_size if builder else 0,
                cluster_count=builder.cluster_count if builder else 0,
            )
        )
        if builder is None:
            continue
        result.files.extend(
            FileTruth(node.path, node.content, tuple(node.chain), index)
            for node in builder.live_files()
        )
        result.directories.extend(d.path for d in builder.directories())
        result.deleted.extend(builder.deleted)
        result.modified.extend(builder.modified)

    logger.info(
        "Wrote %s: %d bytes, %d partitions, %d live files",
        out_path,
        image_size,
        len(placements),
        len(result.files),
    )
    return result
