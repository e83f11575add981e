"""Scripted malware. Every function here works through the disk and the file
table like any other program; none of them can take a TrustedStore.
"""
import logging
import struct
from dataclasses import dataclass

from avbastion.engine import AlgorithmCatalog
from avbastion.errors import DiskFull
from avbastion.fstore import (MAX_RUN, RLE_MAGIC, FileId, FileKind, FileStore,
                              RleContainer, View)
from avbastion.integrity import (SEAL_SIZE, ScanStatus, StateDb, StateEntry,
                                 fnv64, parse_state_records)
from avbastion.rng import Rng
from avbastion.vdisk import SectorIndex, VirtualDisk

logger = logging.getLogger(__name__)

PAYLOAD_PREFIX_SIZE = 16
ATTACKER_STUB = b"MZ\x90\x00hijacked-av-component\x00"


@dataclass(frozen=True)
class VirusSample:
    family: int
    evades: frozenset[int]
    payload: bytes


def make_sample(catalog: AlgorithmCatalog, family: int, evades: frozenset[int], rng: Rng) -> VirusSample:
    """The payload carries the family's pattern for every algorithm it does not evade."""
    body = b"".join(catalog.pattern(family, a)
                    for a in range(catalog.algorithms) if a not in evades)
    return VirusSample(family, frozenset(evades), rng.bytes(PAYLOAD_PREFIX_SIZE) + body)


@dataclass(frozen=True)
class AttackKnowledge:
    """What the attacker learned about the AV files at one moment. Never refreshed."""
    known_names: frozenset[str] = frozenset()
    known_sizes: frozenset[int] = frozenset()
    # (length, digest) pairs; a digest can only match content of the same length
    known_digests: frozenset[tuple[int, int]] = frozenset()


def snapshot_knowledge(fs: FileStore, ids: list[FileId]) -> AttackKnowledge:
    entries = [fs.entry(i) for i in ids]
    return AttackKnowledge(
        known_names=frozenset(e.name for e in entries),
        known_sizes=frozenset(e.length for e in entries),
        known_digests=frozenset((e.length, fnv64(fs.read_file(e.id, View.RAW))) for e in entries),
    )


def infect_file(fs: FileStore, id: FileId, sample: VirusSample) -> None:
    content = fs.read_file(id, View.RAW)
    fs.overwrite_file(id, content + sample.payload)
    logger.debug("infected file %d with family %d", id, sample.family)


def attack_flip_state(fs: FileStore, state_file_id: FileId, target: FileId, tick: int) -> None:
    """Marks target AlreadyScanned at tick in the persisted state db, claiming a scan after the infection.

    The old seal is kept; there is no key to make a new one.
    """
    data = fs.read_file(state_file_id, View.RAW)
    entries = parse_state_records(data[:-SEAL_SIZE])
    old = entries.get(target, StateEntry())
    # the forged entry must postdate the real one
    entries[target] = StateEntry(ScanStatus.ALREADY_SCANNED, max(tick, old.tick + 1))
    fs.overwrite_file(state_file_id, StateDb(entries).body() + data[-SEAL_SIZE:])


def attack_tamper_signature_db(fs: FileStore, sigdb_file_id: FileId, rng: Rng) -> int:
    """Flips one random byte of the signature file. Returns its position."""
    data = bytearray(fs.read_file(sigdb_file_id, View.RAW))
    position = rng.below(len(data))
    data[position] ^= 1 + rng.below(255)
    fs.overwrite_file(sigdb_file_id, bytes(data))
    return position


def av_locate(fs: FileStore, knowledge: AttackKnowledge) -> set[FileId]:
    found = set()
    digest_lengths = {length for length, _ in knowledge.known_digests}
    for e in fs.files():
        if e.name in knowledge.known_names or e.length in knowledge.known_sizes:
            found.add(e.id)
        elif e.length in digest_lengths and \
                (e.length, fnv64(fs.read_file(e.id, View.RAW))) in knowledge.known_digests:
            found.add(e.id)
    return found


@dataclass
class ReplacedReport:
    replaced: list[FileId]

    @property
    def succeeded(self) -> bool:
        return bool(self.replaced)


def attack_replace_av_executable(fs: FileStore, knowledge: AttackKnowledge) -> ReplacedReport:
    targets = sorted(av_locate(fs, knowledge))
    for id in targets:
        fs.overwrite_file(id, ATTACKER_STUB)
    return ReplacedReport(targets)


def bomb_container(runs: int, run_value: int) -> bytes:
    return RleContainer.from_runs([(MAX_RUN, run_value)] * runs).to_bytes()


def attack_plant_bomb(fs: FileStore, runs: int, run_value: int = 0, name: str = "invoice.rle") -> FileId:
    if runs < 1:
        raise ValueError(f"a bomb needs at least one run, got {runs}")
    return fs.create_file(name, FileKind.COMPRESSED_ARCHIVE, bomb_container(runs, run_value))


def attack_facade_mbr(disk: VirtualDisk, infected_mbr_bytes: bytes) -> SectorIndex:
    """Moves the clean MBR to a free sector, points the standard view at it, infects sector 0."""
    if disk.free_count() < 1:
        raise DiskFull("no free sector for the facade")
    (facade,) = disk.allocate(1)
    disk.write_sectors(facade, disk.read_sectors_raw(0, 1))
    disk.set_boot_pointer(facade)
    size = disk.sector_size
    disk.write_sectors(0, (infected_mbr_bytes + bytes(size))[:size])
    return facade


def attack_install_rootkit(fs: FileStore, infected_id: FileId, sample: VirusSample) -> None:
    """Hooks standard reads of the infected file so they return its pre-infection bytes."""
    content = fs.read_file(infected_id, View.RAW)
    if sample.payload and content.endswith(sample.payload):
        content = content[:-len(sample.payload)]
    fs.install_interceptor(infected_id, content)


FUZZ_CATEGORIES = ("raw", "container", "bad_magic", "zero_count", "count_lie", "truncated")


@dataclass(frozen=True)
class FuzzSample:
    name: str
    kind: FileKind
    content: bytes
    category: str


def _random_container(rng: Rng) -> bytes:
    runs = tuple((1 + rng.below(4096), rng.below(256)) for _ in range(1 + rng.below(32)))
    return RleContainer(runs).to_bytes()


def _malformed_container(rng: Rng) -> tuple[str, bytes]:
    data = bytearray(_random_container(rng))
    run_count = (len(data) - 8) // 3
    match rng.below(4):
        case 0:
            data[:4] = rng.bytes(4)
            if bytes(data[:4]) == RLE_MAGIC:
                data[0] ^= 0xFF
            return "bad_magic", bytes(data)
        case 1:
            i = rng.below(run_count)
            struct.pack_into("<H", data, 8 + 3 * i, 0)
            return "zero_count", bytes(data)
        case 2:
            struct.pack_into("<I", data, 4, run_count + 1 + rng.below(5))
            return "count_lie", bytes(data)
        case _:
            cut = 1 + rng.below(len(data) - 1)
            return "truncated", bytes(data[:len(data) - cut])


def fuzz_generate(rng: Rng, count: int) -> list[FuzzSample]:
    """Random raw files, valid containers and malformed containers in a 40/20/40 mix."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    samples = []
    for i in range(count):
        name = f"fuzz_{i:05d}"
        bucket = rng.below(10)
        if bucket < 4:
            kind = FileKind.EXECUTABLE if rng.chance(1, 2) else FileKind.DATA
            samples.append(FuzzSample(name, kind, rng.bytes(rng.below(2048)), "raw"))
        elif bucket < 6:
            samples.append(FuzzSample(name, FileKind.COMPRESSED_ARCHIVE,
                                      _random_container(rng), "container"))
        else:
            category, content = _malformed_container(rng)
            samples.append(FuzzSample(name, FileKind.COMPRESSED_ARCHIVE, content, category))
    return samples
