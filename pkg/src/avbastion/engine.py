import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from avbastion.budget import BudgetPolicy, Meter, Step, meter_new
from avbastion.errors import (EngineCompromised, FormatError, InvalidK,
                              TamperDetected)
from avbastion.fstore import (FileEntry, FileId, FileKind, FileStore, View,
                              rle_decompress_stream)
from avbastion.integrity import (IntegrityDb, ScanStatus, SignatureDb,
                                 StateDb, encrypt_signatures, fnv64,
                                 get_state, load_integrity, load_signatures,
                                 load_state, load_state_unverified, set_state)
from avbastion.rng import MASK64, Rng
from avbastion.selfprotect import (reseal_manifest, select_algorithms,
                                   verify_manifest)
from avbastion.trusted import ManifestEntry, TrustedStore
from avbastion.vdisk import AuthToken, SectorIndex, VirtualDisk

logger = logging.getLogger(__name__)

COMPONENT_NAMES: dict[str, str] = {
    "scanner": "avscan.exe",
    "updater": "avupdate.exe",
    "monitor": "avguard.sys",
}
DEFAULT_COMPONENT_SIZES = (6000, 10000)
SIGNATURE_FILE = "av_signatures.def"
INTEGRITY_FILE = "av_integrity.db"
STATE_FILE = "av_state.db"


@dataclass(frozen=True)
class AlgorithmCatalog:
    """N detection algorithms times F virus families, one 8-byte pattern per pair."""
    algorithms: int
    families: int

    def __post_init__(self) -> None:
        if self.algorithms < 1 or self.families < 1:
            raise ValueError(
                f"catalog needs at least one algorithm and one family, got {self.algorithms} x {self.families}")
        patterns = {self.pattern(f, a)
                    for f in range(self.families) for a in range(self.algorithms)}
        if len(patterns) != self.algorithms * self.families:
            raise ValueError("pattern collision in the algorithm catalog")

    def pattern(self, family: int, algorithm: int) -> bytes:
        seed = fnv64(struct.pack("<QQ", family, algorithm))
        return Rng(seed).next_u64().to_bytes(8, "little")


class SuspicionReason(Enum):
    BREAK = "break"
    FORMAT_ERROR = "format_error"
    CROSS_VIEW_MISMATCH = "cross_view_mismatch"


@dataclass(frozen=True)
class Clean:
    pass


@dataclass(frozen=True)
class Infected:
    family: int
    algorithm: int


@dataclass(frozen=True)
class Suspicious:
    reason: SuspicionReason


@dataclass(frozen=True)
class Compromised:
    """The engine could not vouch for itself, so it gives no file verdicts."""


type Verdict = Clean | Infected | Suspicious | Compromised


def verdict_to_dict(v: Verdict) -> dict[str, Any]:
    match v:
        case Clean():
            return {"verdict": "clean"}
        case Infected():
            return {"verdict": "infected", "family": v.family, "algorithm": v.algorithm}
        case Suspicious():
            return {"verdict": "suspicious", "reason": v.reason.value}
        case _:
            return {"verdict": "engine_compromised"}


class MbrStatus(Enum):
    CONSISTENT = "consistent"
    FACADE_DETECTED = "facade_detected"
    MODIFIED_DETECTED = "modified_detected"


@dataclass(frozen=True)
class ScanOptions:
    """Defense switches. The defaults are every defense on."""
    trust_state_db: bool = False
    skip_self_check: bool = False
    verify_seals: bool = True
    budget: bool = True
    trusted_bios: bool = True
    rootkit_sweep: bool = True


@dataclass
class EngineFiles:
    signatures: FileId
    integrity: FileId
    state: FileId


@dataclass
class EngineInstance:
    catalog: AlgorithmCatalog
    install_seed: int
    installed: frozenset[int]
    store: TrustedStore
    policy: BudgetPolicy
    sig_db: SignatureDb
    integrity_db: IntegrityDb
    state_db: StateDb
    # None for a detached engine that keeps nothing on the scanned disk
    files: EngineFiles | None = None
    verdict_cache: dict[FileId, Verdict] = field(default_factory=dict)

    @property
    def token(self) -> AuthToken:
        return self.store.token


@dataclass
class ScanReport:
    tick: int
    mode: str
    engine_status: str = "ok"
    self_check: bool = True
    mbr_status: MbrStatus | None = None
    rootkits: list[FileId] = field(default_factory=list)
    verdicts: dict[FileId, Verdict] = field(default_factory=dict)
    files_scanned: int = 0
    bytes_consumed: int = 0
    raw_view: bool = False
    tampered_databases: list[str] = field(default_factory=list)
    changed_files: list[FileId] = field(default_factory=list)

    @property
    def compromised(self) -> bool:
        return self.engine_status == "compromised"

    def to_dict(self) -> dict[str, Any]:
        return {
            "tick": self.tick,
            "mode": self.mode,
            "engine_status": self.engine_status,
            "self_check": self.self_check,
            "mbr_status": self.mbr_status.value if self.mbr_status else None,
            "rootkits": self.rootkits,
            "verdicts": [{"file": fid, **verdict_to_dict(v)}
                         for fid, v in sorted(self.verdicts.items())],
            "files_scanned": self.files_scanned,
            "bytes_consumed": self.bytes_consumed,
            "raw_view": self.raw_view,
            "tampered_databases": self.tampered_databases,
            "changed_files": self.changed_files,
        }


def _build_databases(catalog: AlgorithmCatalog, installed: frozenset[int],
                     store: TrustedStore) -> tuple[SignatureDb, IntegrityDb, StateDb]:
    sig_db = SignatureDb({(f, a): catalog.pattern(f, a)
                          for f in range(catalog.families) for a in sorted(installed)})
    integrity_db = IntegrityDb()
    state_db = StateDb()
    for db in (sig_db, integrity_db, state_db):
        db.reseal(store.seal_key)
    return sig_db, integrity_db, state_db


def _component_bytes(role: str, rng: Rng, sizes: tuple[int, int]) -> bytes:
    low, high = sizes
    length = low + rng.below(max(high - low, 1))
    # obfuscated sizes are multiples of 4096, so original sizes never are
    if length % 4096 == 0:
        length += 1
    header = f"AVB:{role}\0".encode()
    return header + rng.bytes(max(length - len(header), 0))


def engine_install(catalog: AlgorithmCatalog, install_seed: int, k: int,
                   store: TrustedStore, fs: FileStore,
                   policy: BudgetPolicy = BudgetPolicy(),
                   component_sizes: tuple[int, int] = DEFAULT_COMPONENT_SIZES) -> EngineInstance:
    """Installs k of the catalog's algorithms, writes the AV files and records them in the trusted store."""
    if not 1 <= k <= catalog.algorithms:
        raise InvalidK(f"k must be in 1..{catalog.algorithms}, got {k}")
    installed = select_algorithms(install_seed, catalog.algorithms, k)
    sig_db, integrity_db, state_db = _build_databases(catalog, installed, store)

    fs.disk.enroll(store.token)
    store.golden_mbr = fs.disk.read_sectors_raw(0, 1)

    rng = Rng(fnv64(b"components" + (install_seed & MASK64).to_bytes(8, "little")))
    for role, name in COMPONENT_NAMES.items():
        content = _component_bytes(role, rng, component_sizes)
        file_id = fs.create_file(name, FileKind.AV_COMPONENT, content)
        digest = fnv64(content)
        store.manifest.append(ManifestEntry(role, file_id, name, digest, digest))
    reseal_manifest(store)

    files = EngineFiles(
        signatures=fs.create_file(SIGNATURE_FILE, FileKind.DATA,
                                  encrypt_signatures(sig_db, store.definitions_key)),
        integrity=fs.create_file(INTEGRITY_FILE, FileKind.DATA, integrity_db.to_bytes()),
        state=fs.create_file(STATE_FILE, FileKind.DATA, state_db.to_bytes()),
    )
    logger.debug("installed algorithms %s with seed %d", sorted(installed), install_seed)
    return EngineInstance(catalog, install_seed, installed, store, policy,
                          sig_db, integrity_db, state_db, files)


def reference_install(catalog: AlgorithmCatalog, install_seed: int, k: int,
                      store: TrustedStore, policy: BudgetPolicy = BudgetPolicy()) -> EngineInstance:
    """A detached install, as run by an online scanning service: nothing on the scanned disk."""
    if not 1 <= k <= catalog.algorithms:
        raise InvalidK(f"k must be in 1..{catalog.algorithms}, got {k}")
    installed = select_algorithms(install_seed, catalog.algorithms, k)
    sig_db, integrity_db, state_db = _build_databases(catalog, installed, store)
    return EngineInstance(catalog, install_seed, installed, store, policy,
                          sig_db, integrity_db, state_db)


def _databases_sealed(engine: EngineInstance) -> bool:
    key = engine.store.seal_key
    return (engine.sig_db.verify(key) and engine.integrity_db.verify(key)
            and engine.state_db.verify(key))


def match_signatures(sig_db: SignatureDb, data: bytes) -> Verdict:
    for family, algorithm in sorted(sig_db.patterns):
        if sig_db.patterns[(family, algorithm)] in data:
            return Infected(family, algorithm)
    return Clean()


def _inspect(engine: EngineInstance, entry: FileEntry, data: bytes, meter: Meter) -> Verdict:
    if meter.consume(len(data)) == Step.BREAK:
        return Suspicious(SuspicionReason.BREAK)
    scanned = data
    if entry.kind == FileKind.COMPRESSED_ARCHIVE:
        try:
            out = rle_decompress_stream(data, meter)
        except FormatError:
            return Suspicious(SuspicionReason.FORMAT_ERROR)
        if out.broke:
            return Suspicious(SuspicionReason.BREAK)
        scanned = out.data
    return match_signatures(engine.sig_db, scanned)


def new_meter(engine: EngineInstance, entry: FileEntry, options: ScanOptions) -> Meter:
    if not options.budget:
        return Meter.unlimited()
    return meter_new(engine.policy, entry.length)


def _status_for(verdict: Verdict) -> ScanStatus:
    match verdict:
        case Clean():
            return ScanStatus.ALREADY_SCANNED
        case Infected():
            return ScanStatus.INFECTED
        case _:
            return ScanStatus.SUSPICIOUS


def scan_file(engine: EngineInstance, fs: FileStore, id: FileId, view: View,
              meter: Meter, tick: int = 0) -> Verdict:
    """Scans one file and records the outcome in the state and integrity databases."""
    if not _databases_sealed(engine):
        raise EngineCompromised("a database seal does not verify")
    entry = fs.entry(id)
    data = fs.read_file(id, view)
    verdict = _inspect(engine, entry, data, meter)
    set_state(engine.state_db, id, _status_for(verdict), tick,
              engine.token, engine.store)
    if isinstance(verdict, Clean):
        engine.integrity_db.digests[id] = fnv64(data)
        engine.integrity_db.reseal(engine.store.seal_key)
    return verdict


def detect_rootkit(engine: EngineInstance, fs: FileStore, id: FileId) -> bool:
    """Cross-view diff. An interceptor serving the disk's own bytes is invisible to it."""
    return fs.read_file(id, View.RAW) != fs.read_file(id, View.STANDARD)


def check_mbr(disk: VirtualDisk, store: TrustedStore, trusted_bios: bool = True) -> MbrStatus:
    standard = disk.read_mbr_standard()
    if not trusted_bios:
        # only the interceptable view is available
        return MbrStatus.CONSISTENT if standard == store.golden_mbr else MbrStatus.MODIFIED_DETECTED
    raw = disk.read_sectors_raw(0, 1)
    if standard != raw:
        return MbrStatus.FACADE_DETECTED
    if raw != store.golden_mbr:
        return MbrStatus.MODIFIED_DETECTED
    return MbrStatus.CONSISTENT


def repair_mbr(disk: VirtualDisk, store: TrustedStore, token: AuthToken,
               fs: FileStore | None = None) -> None:
    """Writes the golden MBR back to sector 0 and points the boot pointer at it.

    The current facade sector is released. Given the file store, so is every
    other allocated sector no file owns, which covers facades stacked by
    repeated attacks.
    """
    store.authorize(token)
    stray = {disk.boot_pointer}
    if fs is not None:
        owned = {s for f in fs.files() for s in f.sectors}
        stray |= {s for s in range(1, disk.sector_count)
                  if disk.is_allocated(s) and s not in owned}
    disk.write_sectors(0, store.golden_mbr)
    disk.set_boot_pointer(0)
    stray.discard(0)
    disk.release(sorted(stray))


def self_check(engine: EngineInstance, fs: FileStore) -> bool:
    if not engine.store.manifest:
        return True
    return verify_manifest(fs, engine.store)


def _load_databases(engine: EngineInstance, fs: FileStore, options: ScanOptions) -> list[str] | None:
    """Reloads the databases from disk. Returns the tampered-but-recovered names, or None when the engine is compromised."""
    files = engine.files
    if files is None:
        return []
    store = engine.store
    tampered: list[str] = []
    try:
        engine.sig_db = load_signatures(fs.read_file(files.signatures, View.RAW),
                                        store.seal_key, store.definitions_key,
                                        verify=options.verify_seals)
        engine.integrity_db = load_integrity(fs.read_file(files.integrity, View.RAW),
                                             store.seal_key, verify=options.verify_seals)
    except (TamperDetected, FormatError) as e:
        logger.warning("engine load failed: %s", e)
        return None

    state_bytes = fs.read_file(files.state, View.RAW)
    try:
        if options.trust_state_db or not options.verify_seals:
            engine.state_db = load_state_unverified(state_bytes)
        else:
            engine.state_db = load_state(state_bytes, store.seal_key)
    except (TamperDetected, FormatError) as e:
        # the state db has no skip authority, so a forged one is dropped rather than fatal
        logger.warning("state db rejected and rebuilt: %s", e)
        tampered.append("state")
        engine.state_db = StateDb()
    # unverified loads carry the forger's seal; the engine signs what it now holds
    for db in (engine.sig_db, engine.integrity_db, engine.state_db):
        db.reseal(store.seal_key)
    return tampered


def _persist_databases(engine: EngineInstance, fs: FileStore) -> None:
    files = engine.files
    if files is None:
        return
    fs.overwrite_file(files.integrity, engine.integrity_db.to_bytes())
    fs.overwrite_file(files.state, engine.state_db.to_bytes())
    own = fs.entry(files.integrity).sectors + fs.entry(files.state).sectors
    fs.disk.clear_archive_bits(own, engine.token)


def _needs_rescan(engine: EngineInstance, f: FileEntry, dirty: set[SectorIndex],
                  rootkits: list[FileId]) -> bool:
    """Whether an incremental scan must look at f again.

    Dirty sectors cover writes. Hooks and emptied files change a verdict
    without a write, so those files are looked at every time.
    """
    if f.id in rootkits or not f.sectors:
        return True
    if not isinstance(engine.verdict_cache.get(f.id, Clean()), (Clean, Infected)):
        return True
    return any(s in dirty for s in f.sectors)


def _run_pipeline(engine: EngineInstance, fs: FileStore, disk: VirtualDisk,
                  tick: int, options: ScanOptions, incremental: bool) -> ScanReport:
    report = ScanReport(tick, "incremental" if incremental else "full")

    tampered = _load_databases(engine, fs, options)
    if tampered is None:
        report.engine_status = "compromised"
        return report
    report.tampered_databases = tampered
    if options.verify_seals and not _databases_sealed(engine):
        report.engine_status = "compromised"
        return report

    report.self_check = self_check(engine, fs)
    if not report.self_check and not options.skip_self_check:
        logger.warning("self check failed, refusing to scan")
        report.engine_status = "compromised"
        return report

    report.mbr_status = check_mbr(disk, engine.store, options.trusted_bios)

    all_files = fs.files()
    if options.rootkit_sweep:
        report.rootkits = [f.id for f in all_files if detect_rootkit(engine, fs, f.id)]
    view = View.RAW if report.rootkits else View.STANDARD
    report.raw_view = view == View.RAW

    candidates = all_files
    if incremental:
        dirty = disk.changed_sectors(engine.token)
        candidates = [f for f in all_files if _needs_rescan(engine, f, dirty, report.rootkits)]
    if options.trust_state_db:
        candidates = [f for f in candidates
                      if get_state(engine.state_db, f.id).status != ScanStatus.ALREADY_SCANNED]

    fresh: dict[FileId, Verdict] = {}
    if not report.self_check:
        # a replaced engine runs the attacker's code, which vouches for everything
        report.files_scanned = len(candidates)
        report.verdicts = {f.id: Clean() for f in all_files}
        return report

    for f in candidates:
        before = engine.integrity_db.digests.get(f.id)
        meter = new_meter(engine, f, options)
        verdict = scan_file(engine, fs, f.id, view, meter, tick)
        if isinstance(verdict, Clean) and f.id in report.rootkits:
            verdict = Suspicious(SuspicionReason.CROSS_VIEW_MISMATCH)
        if before is not None and engine.integrity_db.digests.get(f.id) != before:
            report.changed_files.append(f.id)
        fresh[f.id] = verdict
        report.files_scanned += 1
        report.bytes_consumed += meter.consumed
        if incremental and isinstance(verdict, (Clean, Infected)):
            disk.clear_archive_bits(f.sectors, engine.token)

    engine.verdict_cache.update(fresh)
    for f in all_files:
        if f.id in fresh:
            report.verdicts[f.id] = fresh[f.id]
        elif incremental:
            report.verdicts[f.id] = engine.verdict_cache.get(f.id, Clean())
        else:
            # skipped on the state db's word
            report.verdicts[f.id] = Clean()
    _persist_databases(engine, fs)
    return report


def full_scan(engine: EngineInstance, fs: FileStore, disk: VirtualDisk,
              tick: int = 0, options: ScanOptions = ScanOptions()) -> ScanReport:
    return _run_pipeline(engine, fs, disk, tick, options, incremental=False)


def incremental_scan(engine: EngineInstance, fs: FileStore, disk: VirtualDisk,
                     tick: int = 0, options: ScanOptions = ScanOptions()) -> ScanReport:
    """Scans only files owning a dirty sector. The state db never decides what to skip here."""
    return _run_pipeline(engine, fs, disk, tick, options, incremental=True)


@dataclass
class SecondOpinionReport:
    tick: int
    modified_components: list[tuple[str, FileId]] = field(default_factory=list)
    rootkits: list[FileId] = field(default_factory=list)
    verdicts: dict[FileId, Verdict] = field(default_factory=dict)
    bytes_consumed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "tick": self.tick,
            "mode": "second_opinion",
            "modified_components": [{"role": role, "file": fid}
                                    for role, fid in self.modified_components],
            "rootkits": self.rootkits,
            "verdicts": [{"file": fid, **verdict_to_dict(v)}
                         for fid, v in sorted(self.verdicts.items())],
            "bytes_consumed": self.bytes_consumed,
        }


def second_opinion_scan(reference: EngineInstance, fs: FileStore,
                        target_manifest: list[ManifestEntry], tick: int = 0) -> SecondOpinionReport:
    """An independent engine checks the target's components against its manifest and scans every file raw."""
    report = SecondOpinionReport(tick)
    for m in target_manifest:
        f = fs.find(m.name)
        if f is None or f.id != m.file_id or fnv64(fs.read_file(m.file_id, View.RAW)) != m.digest:
            report.modified_components.append((m.role, m.file_id))
    for f in fs.files():
        if detect_rootkit(reference, fs, f.id):
            report.rootkits.append(f.id)
        meter = meter_new(reference.policy, f.length)
        verdict = _inspect(reference, f, fs.read_file(f.id, View.RAW), meter)
        if isinstance(verdict, Clean) and f.id in report.rootkits:
            verdict = Suspicious(SuspicionReason.CROSS_VIEW_MISMATCH)
        report.verdicts[f.id] = verdict
        report.bytes_consumed += meter.consumed
    return report
