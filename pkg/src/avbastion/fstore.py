import logging
import struct
from dataclasses import dataclass, field
from enum import Enum

from avbastion.budget import Meter, Step
from avbastion.errors import DiskFull, DuplicateName, FormatError, UnknownFile
from avbastion.vdisk import SectorIndex, VirtualDisk

logger = logging.getLogger(__name__)

type FileId = int

RLE_MAGIC = b"RLE1"
RLE_HEADER_SIZE = 8
RLE_RUN_SIZE = 3
MAX_RUN = 65_535


class FileKind(Enum):
    EXECUTABLE = "executable"
    DATA = "data"
    COMPRESSED_ARCHIVE = "compressed_archive"
    AV_COMPONENT = "av_component"


class View(Enum):
    RAW = "raw"
    STANDARD = "standard"


@dataclass
class FileEntry:
    id: FileId
    name: str
    kind: FileKind
    sectors: list[SectorIndex] = field(default_factory=list)
    length: int = 0


def _contiguous_runs(sectors: list[SectorIndex]) -> list[tuple[SectorIndex, int]]:
    """Groups an ordered sector list into (start, count) runs."""
    runs: list[tuple[SectorIndex, int]] = []
    for s in sectors:
        if runs and runs[-1][0] + runs[-1][1] == s:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((s, 1))
    return runs


class FileStore:
    """File table over a VirtualDisk.

    Raw reads go straight to the sectors. Standard reads go through the
    interceptor table first, which is where a rootkit hooks in.
    """
    disk: VirtualDisk
    _entries: dict[FileId, FileEntry]
    _interceptors: dict[FileId, bytes]
    _next_id: FileId

    def __init__(self, disk: VirtualDisk) -> None:
        self.disk = disk
        self._entries = {}
        self._interceptors = {}
        self._next_id = 1

    def _sectors_for(self, length: int) -> int:
        return -(-length // self.disk.sector_size)

    def _write_content(self, sectors: list[SectorIndex], content: bytes) -> None:
        size = self.disk.sector_size
        padded = content + bytes(len(sectors) * size - len(content))
        pos = 0
        for start, count in _contiguous_runs(sectors):
            self.disk.write_sectors(start, padded[pos:pos + count * size])
            pos += count * size

    def entry(self, id: FileId) -> FileEntry:
        e = self._entries.get(id)
        if e is None:
            raise UnknownFile(f"no file with id {id}")
        return e

    def files(self) -> list[FileEntry]:
        return [self._entries[i] for i in sorted(self._entries)]

    def find(self, name: str) -> FileEntry | None:
        for e in self._entries.values():
            if e.name == name:
                return e
        return None

    def create_file(self, name: str, kind: FileKind, content: bytes) -> FileId:
        if self.find(name) is not None:
            raise DuplicateName(f"a file named '{name}' already exists")
        needed = self._sectors_for(len(content))
        if needed > self.disk.free_count():
            raise DiskFull(
                f"'{name}' needs {needed} sectors, {self.disk.free_count()} free")
        sectors = self.disk.allocate(needed)
        self._write_content(sectors, content)
        id = self._next_id
        self._next_id += 1
        self._entries[id] = FileEntry(id, name, kind, sectors, len(content))
        return id

    def overwrite_file(self, id: FileId, content: bytes, relocate: bool = False) -> None:
        """Replaces the content. Sectors are added or released to fit; with relocate every sector is fresh."""
        e = self.entry(id)
        needed = self._sectors_for(len(content))
        if relocate:
            if needed > self.disk.free_count():
                raise DiskFull(
                    f"relocating '{e.name}' needs {needed} sectors, {self.disk.free_count()} free")
            sectors = self.disk.allocate(needed)
            self.disk.release(e.sectors)
        elif needed > len(e.sectors):
            extra = needed - len(e.sectors)
            if extra > self.disk.free_count():
                raise DiskFull(
                    f"growing '{e.name}' needs {extra} more sectors, {self.disk.free_count()} free")
            sectors = e.sectors + self.disk.allocate(extra)
        else:
            sectors = e.sectors[:needed]
            self.disk.release(e.sectors[needed:])
        self._write_content(sectors, content)
        e.sectors = sectors
        e.length = len(content)

    def rename_file(self, id: FileId, name: str) -> None:
        e = self.entry(id)
        other = self.find(name)
        if other is not None and other.id != id:
            raise DuplicateName(f"a file named '{name}' already exists")
        e.name = name

    def delete_file(self, id: FileId) -> None:
        e = self.entry(id)
        self.disk.release(e.sectors)
        self._interceptors.pop(id, None)
        del self._entries[id]

    def read_file(self, id: FileId, view: View) -> bytes:
        e = self.entry(id)
        if view == View.STANDARD and id in self._interceptors:
            return self._interceptors[id]
        chunks = [self.disk.read_sectors_raw(start, count)
                  for start, count in _contiguous_runs(e.sectors)]
        return b"".join(chunks)[:e.length]

    def install_interceptor(self, id: FileId, substitute: bytes) -> None:
        self.entry(id)
        self._interceptors[id] = substitute

    def remove_interceptor(self, id: FileId) -> None:
        self.entry(id)
        self._interceptors.pop(id, None)


@dataclass(frozen=True)
class RleContainer:
    """magic "RLE1", u32 LE run count, then (u16 LE count >= 1, value byte) per run."""
    runs: tuple[tuple[int, int], ...]

    @classmethod
    def from_runs(cls, runs: list[tuple[int, int]]) -> "RleContainer":
        for i, (count, value) in enumerate(runs):
            if not 1 <= count <= MAX_RUN:
                raise ValueError(f"run {i} count {count} outside 1..{MAX_RUN}")
            if not 0 <= value <= 255:
                raise ValueError(f"run {i} value {value} is not a byte")
        return cls(tuple(runs))

    @property
    def run_count(self) -> int:
        return len(self.runs)

    def decompressed_size(self) -> int:
        return sum(count for count, _ in self.runs)

    def to_bytes(self) -> bytes:
        out = bytearray(RLE_MAGIC)
        out += struct.pack("<I", len(self.runs))
        for count, value in self.runs:
            out += struct.pack("<HB", count, value)
        return bytes(out)


def rle_compress(data: bytes) -> RleContainer:
    runs: list[tuple[int, int]] = []
    for b in data:
        if runs and runs[-1][1] == b and runs[-1][0] < MAX_RUN:
            runs[-1] = (runs[-1][0] + 1, b)
        else:
            runs.append((1, b))
    return RleContainer(tuple(runs))


@dataclass(frozen=True)
class Decompressed:
    """Output of a streaming decode. When broke is set, data holds what was produced before the break."""
    data: bytes
    broke: bool


def _parse_runs(container: bytes) -> list[tuple[int, int]]:
    if len(container) < RLE_HEADER_SIZE:
        raise FormatError(
            f"container of {len(container)} bytes is shorter than the header")
    if container[:4] != RLE_MAGIC:
        raise FormatError(f"bad magic {container[:4]!r}")
    (run_count,) = struct.unpack_from("<I", container, 4)
    expected = RLE_HEADER_SIZE + RLE_RUN_SIZE * run_count
    if len(container) != expected:
        raise FormatError(
            f"run_count {run_count} needs {expected} bytes, container has {len(container)}")
    runs = [struct.unpack_from("<HB", container, RLE_HEADER_SIZE + RLE_RUN_SIZE * i)
            for i in range(run_count)]
    for i, (count, _) in enumerate(runs):
        if count == 0:
            raise FormatError(f"run {i} has a zero count")
    return runs


def rle_decompress_stream(container: bytes, meter: Meter) -> Decompressed:
    """Decodes run by run, charging the meter for every byte produced.

    The run table is validated before any output, so malformed input raises
    FormatError without doing work. Stops right after the run that trips the meter.
    """
    runs = _parse_runs(container)
    out = bytearray()
    for count, value in runs:
        out += bytes((value,)) * count
        if meter.consume(count) == Step.BREAK:
            return Decompressed(bytes(out), broke=True)
    return Decompressed(bytes(out), broke=False)
