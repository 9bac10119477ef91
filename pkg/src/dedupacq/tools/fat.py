"""MBR and FAT16/FAT32 parsing, and the exhaustive artifact inventory."""

import logging
import math
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

from ..errors import (
    CorruptBootSector,
    CorruptChain,
    CorruptPartitionTable,
    CorruptVolume,
    CoverageError,
    NoFatVolume,
    NotAnMbr,
    TruncatedFile,
    UnsupportedVariant,
)
from ..models.digest import Digest, FuzzyDigest
from ..models.image import (
    Artifact,
    ArtifactKind,
    ExtentList,
    coverage_check,
    extent_bytes,
)
from ..models.source import ByteSource
from .hashing import FUZZY_MIN_SIZE, ContentHasher, FuzzyHasher

logger = logging.getLogger(__name__)

SECTOR_SIZE = 512
MAX_ARTIFACT_SIZE = 64 * 1024 * 1024

MBR_TABLE_OFFSET = 446
MBR_SIGNATURE = b"\x55\xaa"
PARTITION_ENTRY = struct.Struct("<B3sB3sII")

#: MBR type codes of FAT12/FAT16/FAT32 partitions, including hidden variants
FAT_TYPE_CODES = frozenset(
    {0x01, 0x04, 0x06, 0x0B, 0x0C, 0x0E, 0x11, 0x14, 0x16, 0x1B, 0x1C, 0x1E}
)

#: BPB common header, offsets 0..35
BPB_LAYOUT = struct.Struct("<3s8sHBHBHHBHHHII")
#: FAT32 extended BPB, offsets 36..47
BPB32_LAYOUT = struct.Struct("<IHHIHH")

#: Cluster count cutovers between FAT12/FAT16/FAT32
FAT12_MAX_CLUSTERS = 4084
FAT16_MAX_CLUSTERS = 65524

DIR_ENTRY = struct.Struct("<11sBBBHHHHHHHI")
DIR_ENTRY_SIZE = 32
ATTR_VOLUME_ID = 0x08
ATTR_DIRECTORY = 0x10
ATTR_LONG_NAME = 0x0F
DELETED_MARK = 0xE5
LFN_LAST = 0x40
NT_LOWER_BASE = 0x08
NT_LOWER_EXT = 0x10


@dataclass(frozen=True)
class PartitionEntry:
    index: int
    type_code: int
    start_lba: int
    sector_count: int
    bootable: bool

    @property
    def start_offset(self) -> int:
        return self.start_lba * SECTOR_SIZE

    @property
    def length(self) -> int:
        return self.sector_count * SECTOR_SIZE

    @property
    def end_offset(self) -> int:
        return self.start_offset + self.length

    @property
    def is_fat(self) -> bool:
        return self.type_code in FAT_TYPE_CODES


def parse_mbr(image: ByteSource) -> List[PartitionEntry]:
    """Decode the classic four-entry partition table of sector 0."""
    if image.size < SECTOR_SIZE:
        raise NotAnMbr(f"Image of {image.size} bytes is shorter than one sector")
    sector = image.read_at(0, SECTOR_SIZE)
    if sector[510:512] != MBR_SIGNATURE:
        raise NotAnMbr("Missing 0x55AA signature at offset 510")

    entries = []
    for index in range(4):
        status, _, type_code, _, start_lba, count = PARTITION_ENTRY.unpack_from(
            sector, MBR_TABLE_OFFSET + index * PARTITION_ENTRY.size
        )
        if type_code == 0 or count == 0:
            continue
        if start_lba == 0:
            raise CorruptPartitionTable(f"Partition {index} starts at sector 0")
        entry = PartitionEntry(index, type_code, start_lba, count, status == 0x80)
        if entry.end_offset > image.size:
            raise CorruptPartitionTable(
                f"Partition {index} ends at byte {entry.end_offset}, "
                f"beyond image size {image.size}"
            )
        entries.append(entry)

    ordered = sorted(entries, key=lambda e: e.start_lba)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start_offset < prev.end_offset:
            raise CorruptPartitionTable(
                f"Partitions {prev.index} and {cur.index} overlap"
            )
    return entries


class FatVariant(str, Enum):
    FAT16 = "FAT16"
    FAT32 = "FAT32"


@dataclass(frozen=True)
class VolumeLayout:
    """Geometry of one FAT volume; all ``*_offset`` values are image offsets."""

    partition_offset: int
    bytes_per_sector: int
    sectors_per_cluster: int
    reserved_sectors: int
    fat_count: int
    sectors_per_fat: int
    root_entry_count: int
    root_dir_first_cluster: int
    total_sectors: int
    data_region_start: int
    cluster_size: int
    cluster_count: int
    variant: FatVariant

    @property
    def fat_bytes(self) -> int:
        return self.sectors_per_fat * self.bytes_per_sector

    def fat_offset(self, copy: int) -> int:
        return (
            self.partition_offset
            + self.reserved_sectors * self.bytes_per_sector
            + copy * self.fat_bytes
        )

    @property
    def root_dir_offset(self) -> int:
        return self.fat_offset(self.fat_count)

    @property
    def root_dir_bytes(self) -> int:
        return self.data_region_start - self.root_dir_offset

    @property
    def data_region_end(self) -> int:
        return self.data_region_start + self.cluster_count * self.cluster_size

    @property
    def volume_end(self) -> int:
        return self.partition_offset + self.total_sectors * self.bytes_per_sector

    @property
    def max_cluster(self) -> int:
        return self.cluster_count + 1

    def cluster_offset(self, cluster: int) -> int:
        return self.data_region_start + (cluster - 2) * self.cluster_size


def parse_volume(image: ByteSource, partition: PartitionEntry) -> VolumeLayout:
    """Decode the BIOS Parameter Block of a partition's first sector."""
    if partition.end_offset > image.size:
        raise CorruptPartitionTable(f"Partition {partition.index} is out of bounds")
    sector = image.read_at(partition.start_offset, SECTOR_SIZE)
    (
        _jump,
        _oem,
        bytes_per_sector,
        sectors_per_cluster,
        reserved,
        fat_count,
        root_entries,
        total16,
        _media,
        fat_size16,
        _spt,
        _heads,
        _hidden,
        total32,
    ) = BPB_LAYOUT.unpack_from(sector, 0)

    if bytes_per_sector not in (512, 1024, 2048, 4096):
        raise CorruptBootSector("bytes_per_sector", bytes_per_sector)
    if sectors_per_cluster not in tuple(1 << n for n in range(8)):
        raise CorruptBootSector("sectors_per_cluster", sectors_per_cluster)
    if reserved == 0:
        raise CorruptBootSector("reserved_sectors", reserved, "must be > 0")
    if fat_count == 0:
        raise CorruptBootSector("fat_count", fat_count, "must be > 0")
    if (root_entries * DIR_ENTRY_SIZE) % bytes_per_sector:
        raise CorruptBootSector(
            "root_entry_count", root_entries, "not sector aligned"
        )
    if sector[510:512] != MBR_SIGNATURE:
        raise CorruptBootSector("signature", sector[510:512].hex())

    total_sectors = total16 or total32
    if total_sectors == 0:
        raise CorruptBootSector("total_sectors", 0)

    fat_size32, _flags, _version, root_cluster, _fsinfo, _backup = (
        BPB32_LAYOUT.unpack_from(sector, 36)
    )
    sectors_per_fat = fat_size16 or fat_size32
    if sectors_per_fat == 0:
        raise CorruptBootSector("sectors_per_fat", 0)

    root_dir_sectors = math.ceil(root_entries * DIR_ENTRY_SIZE / bytes_per_sector)
    meta_sectors = reserved + fat_count * sectors_per_fat + root_dir_sectors
    if meta_sectors >= total_sectors:
        raise CorruptBootSector(
            "total_sectors", total_sectors, "smaller than metadata region"
        )
    cluster_count = (total_sectors - meta_sectors) // sectors_per_cluster

    if cluster_count <= FAT12_MAX_CLUSTERS:
        raise UnsupportedVariant("FAT12")
    if cluster_count <= FAT16_MAX_CLUSTERS:
        variant = FatVariant.FAT16
        if fat_size16 == 0:
            raise CorruptBootSector("sectors_per_fat16", 0, "zero on FAT16 volume")
        root_cluster = 0
    else:
        variant = FatVariant.FAT32
        if fat_size16 != 0 or root_entries != 0:
            raise CorruptBootSector(
                "sectors_per_fat16", fat_size16, "non-zero on FAT32 volume"
            )
        if not 2 <= root_cluster <= cluster_count + 1:
            raise CorruptBootSector("root_dir_first_cluster", root_cluster)

    layout = VolumeLayout(
        partition_offset=partition.start_offset,
        bytes_per_sector=bytes_per_sector,
        sectors_per_cluster=sectors_per_cluster,
        reserved_sectors=reserved,
        fat_count=fat_count,
        sectors_per_fat=sectors_per_fat,
        root_entry_count=root_entries,
        root_dir_first_cluster=root_cluster,
        total_sectors=total_sectors,
        data_region_start=partition.start_offset + meta_sectors * bytes_per_sector,
        cluster_size=bytes_per_sector * sectors_per_cluster,
        cluster_count=cluster_count,
        variant=variant,
    )
    if layout.volume_end > partition.end_offset:
        raise CorruptBootSector(
            "total_sectors", total_sectors, "volume larger than its partition"
        )
    return layout


class AllocationTable:
    """Decoded first FAT copy: cluster -> next cluster, end, free or bad."""

    def __init__(self, variant: FatVariant, entries: Sequence[int], max_cluster: int):
        self.variant = variant
        self.entries = entries
        self.max_cluster = max_cluster
        if variant is FatVariant.FAT16:
            self.bad_mark, self.eoc_min = 0xFFF7, 0xFFF8
        else:
            self.bad_mark, self.eoc_min = 0x0FFFFFF7, 0x0FFFFFF8

    def is_free(self, cluster: int) -> bool:
        return self.entries[cluster] == 0

    def is_bad(self, cluster: int) -> bool:
        return self.entries[cluster] == self.bad_mark

    def is_end(self, cluster: int) -> bool:
        return self.entries[cluster] >= self.eoc_min

    def next_cluster(self, cluster: int) -> Optional[int]:
        """Following cluster, or None at end of chain."""
        if self.is_end(cluster):
            return None
        return self.entries[cluster]

    def chain(self, start: int, path: str) -> List[int]:
        """Walk a chain from ``start``; cycles and broken links raise."""
        chain: List[int] = []
        seen: Set[int] = set()
        cluster: Optional[int] = start
        while cluster is not None:
            if not 2 <= cluster <= self.max_cluster:
                raise CorruptChain(path, f"cluster {cluster} out of range")
            if cluster in seen:
                raise CorruptChain(path, f"cycle at cluster {cluster}")
            if self.is_free(cluster):
                raise CorruptChain(path, f"free cluster {cluster} inside chain")
            if self.is_bad(cluster):
                raise CorruptChain(path, f"bad cluster {cluster} inside chain")
            seen.add(cluster)
            chain.append(cluster)
            cluster = self.next_cluster(cluster)
        return chain


def read_fat(image: ByteSource, layout: VolumeLayout) -> AllocationTable:
    """Decode the first FAT copy (16-bit or 28-bit entries)."""
    end = layout.fat_offset(layout.fat_count)
    if end > image.size:
        raise CorruptVolume(f"FAT region ends at {end}, beyond image size")
    entry_size = 2 if layout.variant is FatVariant.FAT16 else 4
    count = layout.cluster_count + 2
    if count * entry_size > layout.fat_bytes:
        raise CorruptVolume(
            f"FAT of {layout.fat_bytes} bytes cannot map "
            f"{layout.cluster_count} clusters"
        )

    raw = image.read_at(layout.fat_offset(0), layout.fat_bytes)
    for copy in range(1, layout.fat_count):
        if image.read_at(layout.fat_offset(copy), layout.fat_bytes) != raw:
            logger.warning(
                "FAT copy %d differs from the first copy at offset %d; "
                "chains follow the first copy",
                copy,
                layout.partition_offset,
            )

    if entry_size == 2:
        entries: Sequence[int] = struct.unpack_from(f"<{count}H", raw)
    else:
        entries = [v & 0x0FFFFFFF for v in struct.unpack_from(f"<{count}I", raw)]
    return AllocationTable(layout.variant, entries, layout.max_cluster)


@dataclass(frozen=True)
class FileEntry:
    path: str
    size: int
    cluster_chain: Tuple[int, ...]
    created: Optional[datetime]
    modified: Optional[datetime]
    is_directory: bool = False


def decode_fat_datetime(date: int, time: int, tenths: int = 0) -> Optional[datetime]:
    if date == 0:
        return None
    try:
        return datetime(
            1980 + (date >> 9),
            (date >> 5) & 0x0F,
            date & 0x1F,
            time >> 11,
            (time >> 5) & 0x3F,
            min((time & 0x1F) * 2 + tenths // 100, 59),
            tzinfo=timezone.utc,
        )
    except ValueError:
        return None


def lfn_checksum(short_name: bytes) -> int:
    total = 0
    for byte in short_name:
        total = (((total & 1) << 7) + (total >> 1) + byte) & 0xFF
    return total


def _short_name(raw: bytes, nt_flags: int) -> str:
    base, ext = raw[:8], raw[8:11]
    if base[:1] == b"\x05":
        base = b"\xe5" + base[1:]
    base_text = base.decode("cp437").rstrip(" ")
    ext_text = ext.decode("cp437").rstrip(" ")
    if nt_flags & NT_LOWER_BASE:
        base_text = base_text.lower()
    if nt_flags & NT_LOWER_EXT:
        ext_text = ext_text.lower()
    return f"{base_text}.{ext_text}" if ext_text else base_text


class _LongName:
    """Accumulates a run of VFAT long-name entries."""

    def __init__(self) -> None:
        self.parts: Dict[int, bytes] = {}
        self.expected = 0
        self.checksum: Optional[int] = None
        self.broken = False

    def add(self, entry: bytes) -> None:
        order = entry[0]
        seq = order & 0x1F
        if order & LFN_LAST:
            self.parts = {}
            self.broken = False
            self.expected = seq
            self.checksum = entry[13]
        elif self.checksum != entry[13] or seq + 1 not in self.parts:
            self.broken = True
        self.parts[seq] = entry[1:11] + entry[14:26] + entry[28:32]

    def resolve(self, short_raw: bytes) -> Optional[str]:
        complete = (
            not self.broken
            and self.expected > 0
            and set(self.parts) == set(range(1, self.expected + 1))
            and self.checksum == lfn_checksum(short_raw)
        )
        if not complete:
            return None
        data = b"".join(self.parts[i] for i in range(1, self.expected + 1))
        name = data.decode("utf-16-le", errors="replace")
        return name.split("\x00", 1)[0].rstrip("￿")


@dataclass(frozen=True)
class _DirRecord:
    name: str
    attr: int
    first_cluster: int
    size: int
    created: Optional[datetime]
    modified: Optional[datetime]


def _parse_directory(data: bytes) -> Iterator[_DirRecord]:
    """Live entries of a raw directory, skipping deleted, labels and dots."""
    long_name = _LongName()
    for pos in range(0, len(data) - DIR_ENTRY_SIZE + 1, DIR_ENTRY_SIZE):
        entry = data[pos : pos + DIR_ENTRY_SIZE]
        first = entry[0]
        if first == 0x00:
            return
        if first == DELETED_MARK:
            long_name = _LongName()
            continue
        (
            raw_name,
            attr,
            nt_flags,
            crt_tenths,
            crt_time,
            crt_date,
            _acc_date,
            cluster_hi,
            wrt_time,
            wrt_date,
            cluster_lo,
            size,
        ) = DIR_ENTRY.unpack(entry)
        if attr & 0x3F == ATTR_LONG_NAME:
            long_name.add(entry)
            continue
        resolved = long_name.resolve(raw_name)
        long_name = _LongName()
        if attr & ATTR_VOLUME_ID:
            continue
        if raw_name[:1] == b".":
            continue
        yield _DirRecord(
            name=resolved or _short_name(raw_name, nt_flags),
            attr=attr,
            first_cluster=(cluster_hi << 16) | cluster_lo,
            size=size,
            created=decode_fat_datetime(crt_date, crt_time, crt_tenths),
            modified=decode_fat_datetime(wrt_date, wrt_time),
        )


@dataclass
class VolumeWalk:
    """Everything a depth-first walk of one volume finds."""

    entries: List[FileEntry]
    root_chain: Tuple[int, ...]


def walk_volume(
    image: ByteSource, layout: VolumeLayout, fat: AllocationTable
) -> VolumeWalk:
    """Depth-first walk from the root directory, files and directories alike.

    Every cluster may belong to one chain only; cross-links raise
    ``CorruptChain``.
    """
    owned: Set[int] = set()
    cs = layout.cluster_size

    def claim(path: str, chain: Sequence[int]) -> None:
        for cluster in chain:
            if cluster in owned:
                raise CorruptChain(path, f"cross-linked cluster {cluster}")
            owned.add(cluster)

    def read_chain(chain: Sequence[int]) -> bytes:
        return b"".join(image.read_at(layout.cluster_offset(c), cs) for c in chain)

    if layout.variant is FatVariant.FAT16:
        if layout.data_region_start > image.size:
            raise CorruptVolume("Root directory region is truncated")
        root_chain: Tuple[int, ...] = ()
        root_data = image.read_at(layout.root_dir_offset, layout.root_dir_bytes)
    else:
        root_chain = tuple(fat.chain(layout.root_dir_first_cluster, "/"))
        claim("/", root_chain)
        root_data = read_chain(root_chain)

    entries: List[FileEntry] = []

    def visit(directory: str, data: bytes) -> None:
        for record in _parse_directory(data):
            path = f"{directory.rstrip('/')}/{record.name}"
            is_dir = bool(record.attr & ATTR_DIRECTORY)
            if record.first_cluster == 0:
                if is_dir:
                    raise CorruptChain(path, "directory without clusters")
                chain: List[int] = []
            else:
                chain = fat.chain(record.first_cluster, path)
            claim(path, chain)
            if not is_dir:
                chain_bytes = len(chain) * cs
                if record.size > chain_bytes:
                    raise TruncatedFile(path, record.size, chain_bytes)
                if len(chain) > math.ceil(record.size / cs):
                    logger.warning(
                        "%s: chain of %d clusters is longer than size %d implies",
                        path,
                        len(chain),
                        record.size,
                    )
            entries.append(
                FileEntry(
                    path=path,
                    size=0 if is_dir else record.size,
                    cluster_chain=tuple(chain),
                    created=record.created,
                    modified=record.modified,
                    is_directory=is_dir,
                )
            )
            if is_dir:
                visit(path, read_chain(chain))

    visit("/", root_data)
    return VolumeWalk(entries, root_chain)


def enumerate_files(
    image: ByteSource,
    layout: VolumeLayout,
    fat: AllocationTable,
    include_directories: bool = False,
) -> List[FileEntry]:
    entries = walk_volume(image, layout, fat).entries
    if include_directories:
        return entries
    return [e for e in entries if not e.is_directory]


@dataclass(frozen=True)
class PlannedArtifact:
    """An artifact whose location is known but whose bytes are not yet hashed."""

    kind: ArtifactKind
    extents: ExtentList
    path: Optional[str] = None
    created: Optional[datetime] = None
    modified: Optional[datetime] = None
    part: Optional[int] = None

    @property
    def logical_size(self) -> int:
        return self.extents.total_length

    @property
    def first_offset(self) -> int:
        return self.extents.first_offset


def _ascending_runs(pairs: Sequence[Tuple[int, int]]) -> List[ExtentList]:
    """Group logically ordered pairs into offset-ascending extent lists,
    cutting wherever the chain jumps backwards."""
    runs: List[List[Tuple[int, int]]] = []
    for offset, length in pairs:
        if runs and offset >= runs[-1][-1][0] + runs[-1][-1][1]:
            runs[-1].append((offset, length))
        else:
            runs.append([(offset, length)])
    return [ExtentList.coalesced(run) for run in runs]


class _VolumePlanner:
    def __init__(self, image: ByteSource, partition: PartitionEntry):
        self.image = image
        self.partition = partition
        self.layout = parse_volume(image, partition)
        self.fat = read_fat(image, self.layout)
        self.found: List[Tuple[ArtifactKind, List[ExtentList], dict]] = []

    def add(self, kind: ArtifactKind, offset: int, length: int) -> None:
        if length > 0:
            self.found.append((kind, [ExtentList.from_pairs([(offset, length)])], {}))

    def plan(self) -> List[Tuple[ArtifactKind, List[ExtentList], dict]]:
        layout = self.layout
        walk = walk_volume(self.image, layout, self.fat)
        logger.debug(
            "%s volume at %d: %d clusters of %d bytes, %d entries",
            layout.variant.value,
            layout.partition_offset,
            layout.cluster_count,
            layout.cluster_size,
            len(walk.entries),
        )

        self.add(
            ArtifactKind.FS_METADATA,
            layout.partition_offset,
            layout.reserved_sectors * layout.bytes_per_sector,
        )
        for copy in range(layout.fat_count):
            self.add(
                ArtifactKind.FS_METADATA, layout.fat_offset(copy), layout.fat_bytes
            )
        self.add(
            ArtifactKind.FS_METADATA, layout.root_dir_offset, layout.root_dir_bytes
        )

        owned: Set[int] = set(walk.root_chain)
        directory_clusters = list(walk.root_chain)
        for entry in walk.entries:
            owned.update(entry.cluster_chain)
            if entry.is_directory:
                directory_clusters.extend(entry.cluster_chain)
            else:
                self._plan_file(entry)
        for cluster in directory_clusters:
            self.add(
                ArtifactKind.FS_METADATA,
                layout.cluster_offset(cluster),
                layout.cluster_size,
            )

        run_start: Optional[int] = None
        for cluster in range(2, layout.max_cluster + 2):
            free = cluster <= layout.max_cluster and cluster not in owned
            if free and run_start is None:
                run_start = cluster
            elif not free and run_start is not None:
                self.add(
                    ArtifactKind.UNALLOCATED,
                    layout.cluster_offset(run_start),
                    (cluster - run_start) * layout.cluster_size,
                )
                run_start = None

        self.add(
            ArtifactKind.FS_METADATA,
            layout.data_region_end,
            layout.volume_end - layout.data_region_end,
        )
        self.add(
            ArtifactKind.INTER_PARTITION_GAP,
            layout.volume_end,
            self.partition.end_offset - layout.volume_end,
        )
        return self.found

    def _plan_file(self, entry: FileEntry) -> None:
        cs = self.layout.cluster_size
        data: List[Tuple[int, int]] = []
        slack: List[Tuple[int, int]] = []
        remaining = entry.size
        for cluster in entry.cluster_chain:
            offset = self.layout.cluster_offset(cluster)
            used = min(remaining, cs)
            if used:
                data.append((offset, used))
            if used < cs:
                slack.append((offset + used, cs - used))
            remaining -= used
        if data:
            meta = {
                "path": entry.path,
                "created": entry.created,
                "modified": entry.modified,
            }
            self.found.append((ArtifactKind.FILE_DATA, _ascending_runs(data), meta))
        for run in _ascending_runs(slack):
            self.found.append((ArtifactKind.FILE_SLACK, [run], {}))


def plan_artifacts(
    image: ByteSource, max_artifact_size: int = MAX_ARTIFACT_SIZE
) -> Tuple[List[PlannedArtifact], int]:
    """Locate every artifact of an MBR-partitioned image.

    The result tiles ``[0, image.size)`` exactly; a coverage failure is a
    parser defect and raises ``CoverageError``.
    """
    if max_artifact_size < 1:
        raise ValueError("max_artifact_size must be positive")
    size = image.size
    partitions = sorted(parse_mbr(image), key=lambda p: p.start_lba)
    if not any(p.is_fat for p in partitions):
        raise NoFatVolume("No FAT partition in the partition table")

    found: List[Tuple[ArtifactKind, List[ExtentList], dict]] = []

    def add(kind: ArtifactKind, offset: int, length: int) -> None:
        if length > 0:
            found.append((kind, [ExtentList.from_pairs([(offset, length)])], {}))

    add(ArtifactKind.FS_METADATA, 0, partitions[0].start_offset)
    cursor = partitions[0].start_offset
    for partition in partitions:
        add(ArtifactKind.INTER_PARTITION_GAP, cursor, partition.start_offset - cursor)
        if partition.is_fat:
            found.extend(_VolumePlanner(image, partition).plan())
        else:
            logger.warning(
                "Partition %d has type 0x%02x; covering it as uninterpreted bytes",
                partition.index,
                partition.type_code,
            )
            add(
                ArtifactKind.INTER_PARTITION_GAP,
                partition.start_offset,
                partition.length,
            )
        cursor = partition.end_offset
    add(ArtifactKind.INTER_PARTITION_GAP, cursor, size - cursor)

    planned: List[PlannedArtifact] = []
    for kind, runs, meta in found:
        pieces = [piece for run in runs for piece in run.split(max_artifact_size)]
        numbered = kind is ArtifactKind.FILE_DATA and len(pieces) > 1
        for part, piece in enumerate(pieces):
            planned.append(
                PlannedArtifact(kind, piece, part=part if numbered else None, **meta)
            )
    planned.sort(key=lambda a: a.first_offset)

    report = coverage_check(planned, size)
    if not report.ok:
        raise CoverageError(
            f"Artifact inventory does not cover the image: {report.describe()}",
            report,
        )
    return planned, size


def wants_fuzzy(planned: PlannedArtifact) -> bool:
    return (
        planned.kind is ArtifactKind.FILE_DATA
        and planned.logical_size >= FUZZY_MIN_SIZE
    )


def finish_artifact(
    planned: PlannedArtifact, digest: Digest, fuzzy: Optional[FuzzyDigest] = None
) -> Artifact:
    return Artifact(
        kind=planned.kind,
        extents=planned.extents,
        digest=digest,
        fuzzy=fuzzy,
        path=planned.path,
        created=planned.created,
        modified=planned.modified,
        part=planned.part,
    )


def hash_planned(
    image: ByteSource, planned: PlannedArtifact, compute_fuzzy: bool = True
) -> Artifact:
    content = ContentHasher()
    fuzzy = FuzzyHasher() if compute_fuzzy and wants_fuzzy(planned) else None
    for chunk in extent_bytes(image, planned.extents):
        content.update(chunk)
        if fuzzy is not None:
            fuzzy.update(chunk)
    return finish_artifact(
        planned, content.digest(), fuzzy.digest() if fuzzy is not None else None
    )


def enumerate_artifacts(
    image: ByteSource,
    max_artifact_size: int = MAX_ARTIFACT_SIZE,
    compute_fuzzy: bool = True,
) -> Tuple[List[Artifact], int]:
    """Plan and hash every artifact of the image, in canonical order."""
    planned, size = plan_artifacts(image, max_artifact_size)
    return [hash_planned(image, p, compute_fuzzy) for p in planned], size
