"""Timeline execution, attack outcome judgement, metrics and the fuzz run."""
import json
import logging
import os
from dataclasses import dataclass, field
from importlib.resources import files
from typing import Any

from avbastion.attacks import (AttackKnowledge, VirusSample, attack_facade_mbr,
                               attack_flip_state, attack_install_rootkit,
                               attack_plant_bomb, attack_replace_av_executable,
                               attack_tamper_signature_db, fuzz_generate,
                               infect_file, make_sample, snapshot_knowledge)
from avbastion.budget import Meter
from avbastion.engine import (DEFAULT_COMPONENT_SIZES, AlgorithmCatalog,
                              Clean, EngineFiles,
                              EngineInstance, MbrStatus, ScanReport,
                              SecondOpinionReport, engine_install, full_scan,
                              incremental_scan, new_meter, reference_install,
                              repair_mbr, scan_file, second_opinion_scan)
from avbastion.errors import AvBastionError, SchemaError, SelfCheckFailed
from avbastion.fstore import FileId, FileKind, FileStore, View, rle_compress
from avbastion.rng import Rng
from avbastion.scenario import (Action, DiskSpec, Scenario, TimelineEntry,
                                parse_scenario)
from avbastion.selfprotect import (distinct_install_seed, obfuscate_epoch,
                                   select_algorithms)
from avbastion.trusted import TrustedStore, provision
from avbastion.vdisk import VirtualDisk, disk_new

logger = logging.getLogger(__name__)

SEED_ENV = "AVB_SEED"
# every install of a non-polymorphic product is the same install
FIXED_INSTALL_SEED = 0
BOOT_SIGNATURE = b"\x55\xaa"
INFECTED_MBR = b"\xeb\x3c\x90BOOTKIT\x00"
FUZZ_DISK_SECTORS = 512

type AnyReport = ScanReport | SecondOpinionReport


def resolve_seed(scenario: Scenario, override: int | None = None) -> int:
    """--seed flag, then the scenario's seed, then AVB_SEED, then 0."""
    if override is not None:
        return override
    if scenario.seed is not None:
        return scenario.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env, 0)
        except ValueError:
            raise SchemaError([(SEED_ENV, f"expected an integer, but got {env!r}")]) from None
    return 0


def bootstrap_mbr(rng: Rng, sector_size: int) -> bytes:
    body = b"AVB-MBR\x00" + rng.bytes(sector_size - 10)
    return body + BOOT_SIGNATURE


@dataclass
class AttackRecord:
    tick: int
    action: Action
    target: FileId | None = None
    expect: str | None = None
    applied: bool = True
    detail: str | None = None
    replaced: list[FileId] | None = None
    outcome: str = "pending"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"tick": self.tick, "type": self.action.value,
                               "outcome": self.outcome}
        if self.target is not None:
            out["target"] = self.target
        if self.expect is not None:
            out["expect"] = self.expect
        if self.detail is not None:
            out["detail"] = self.detail
        if self.replaced is not None:
            out["replaced"] = self.replaced
        return out


@dataclass
class World:
    """One isolated testbed: disk, files, trusted store and the installed engine."""
    scenario: Scenario
    seed: int
    catalog: AlgorithmCatalog
    disk: VirtualDisk
    fs: FileStore
    store: TrustedStore
    engine: EngineInstance
    content_rng: Rng
    attack_rng: Rng
    epoch_rng: Rng
    reference_rng: Rng
    ids: dict[str, FileId] = field(default_factory=dict)
    samples: dict[FileId, VirusSample] = field(default_factory=dict)
    knowledge: AttackKnowledge | None = None
    reference: EngineInstance | None = None
    epoch_slot: int = 0

    @property
    def engine_files(self) -> EngineFiles:
        assert self.engine.files is not None
        return self.engine.files


def build_world(scenario: Scenario, seed: int, component_sizes: tuple[int, int] | None = None) -> World:
    root = Rng(seed)
    store_rng, install_rng, content_rng = root.fork(), root.fork(), root.fork()
    attack_rng, epoch_rng, reference_rng = root.fork(), root.fork(), root.fork()

    disk = disk_new(scenario.disk.sectors, scenario.disk.sector_size)
    disk.write_sectors(0, bootstrap_mbr(content_rng, disk.sector_size))
    fs = FileStore(disk)
    ids = {}
    for spec in scenario.files:
        content = spec.content
        if content is None:
            content = content_rng.bytes(spec.size)
            if spec.kind == FileKind.COMPRESSED_ARCHIVE:
                content = rle_compress(content).to_bytes()
        ids[spec.name] = fs.create_file(spec.name, spec.kind, content)

    catalog = AlgorithmCatalog(scenario.algorithms, scenario.families)
    store = provision(store_rng)
    install_seed = install_rng.next_u64() if scenario.flags.polymorphic else FIXED_INSTALL_SEED
    engine = engine_install(catalog, install_seed, scenario.k, store, fs, scenario.budget,
                            component_sizes or DEFAULT_COMPONENT_SIZES)
    return World(scenario, seed, catalog, disk, fs, store, engine,
                 content_rng, attack_rng, epoch_rng, reference_rng, ids)


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    scans: list[dict[str, Any]] = field(default_factory=list)
    attacks: list[AttackRecord] = field(default_factory=list)
    epochs: list[dict[str, Any]] = field(default_factory=list)
    errors: list[dict[str, Any]] = field(default_factory=list)
    summary: dict[str, int] = field(default_factory=dict)

    @property
    def expectation_failures(self) -> list[AttackRecord]:
        return [a for a in self.attacks if a.expect is not None and a.outcome != a.expect]

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "scans": self.scans,
            "attacks": [a.to_dict() for a in self.attacks],
            "epochs": self.epochs,
            "errors": self.errors,
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _reference(world: World) -> EngineInstance:
    """The online scanning service: its own trusted store and, with polymorphism, its own subset."""
    if world.reference is None:
        s = world.scenario
        if s.flags.polymorphic:
            seed = distinct_install_seed(world.reference_rng, s.algorithms,
                                         s.second_opinion_k, world.engine.installed)
        else:
            seed = world.engine.install_seed
        world.reference = reference_install(world.catalog, seed, s.second_opinion_k,
                                            provision(world.reference_rng), s.budget)
    return world.reference


def _evaded_algorithms(world: World, entry: TimelineEntry) -> frozenset[int]:
    evades: frozenset[int] = entry.params["evades"]
    if entry.params["evade_studied_install"]:
        s = world.scenario
        if s.flags.polymorphic:
            studied = distinct_install_seed(world.attack_rng, s.algorithms, s.k,
                                            world.engine.installed)
        else:
            studied = world.engine.install_seed
        evades |= select_algorithms(studied, s.algorithms, s.k)
    return evades


def _knowledge(world: World) -> AttackKnowledge:
    if world.knowledge is None:
        world.knowledge = snapshot_knowledge(world.fs, [
            f.id for f in world.fs.files() if f.kind == FileKind.AV_COMPONENT])
    return world.knowledge


def _apply_attack(world: World, entry: TimelineEntry) -> AttackRecord:
    record = AttackRecord(entry.tick, entry.action, expect=entry.expect)
    fs = world.fs
    target = world.ids.get(entry.params.get("file", ""))
    record.target = target
    try:
        match entry.action:
            case Action.INFECT:
                assert target is not None
                sample = make_sample(world.catalog, entry.params["family"],
                                     _evaded_algorithms(world, entry), world.attack_rng)
                infect_file(fs, target, sample)
                world.samples[target] = sample
            case Action.FLIP_STATE:
                assert target is not None
                attack_flip_state(fs, world.engine_files.state, target, entry.tick)
            case Action.TAMPER_SIGNATURE_DB:
                attack_tamper_signature_db(fs, world.engine_files.signatures, world.attack_rng)
            case Action.REPLACE_AV_EXECUTABLE:
                record.replaced = attack_replace_av_executable(fs, _knowledge(world)).replaced
            case Action.PLANT_BOMB:
                name = entry.params["name"]
                record.target = attack_plant_bomb(fs, entry.params["runs"],
                                                  entry.params["value"], name)
                world.ids[name] = record.target
            case Action.FACADE_MBR:
                attack_facade_mbr(world.disk, INFECTED_MBR)
            case Action.INSTALL_ROOTKIT:
                assert target is not None
                sample = world.samples.get(target)
                if sample is None:
                    raise AvBastionError(f"file {target} was never infected")
                attack_install_rootkit(fs, target, sample)
            case _:
                raise ValueError(f"{entry.action.value} is not an attack")
    except AvBastionError as e:
        record.applied = False
        record.outcome = "failed"
        record.detail = str(e)
    logger.debug("tick %d: %s applied=%s", entry.tick, entry.action.value, record.applied)
    return record


def _run_epoch(world: World, tick: int, metrics: MetricsReport) -> None:
    if not world.scenario.flags.obfuscation:
        metrics.epochs.append({"tick": tick, "status": "disabled"})
        return
    try:
        obfuscate_epoch(world.fs, world.store, world.epoch_rng)
        metrics.epochs.append({"tick": tick, "status": "ok", "epoch": world.store.epoch})
    except SelfCheckFailed as e:
        logger.warning("epoch at tick %d refused: %s", tick, e)
        metrics.epochs.append({"tick": tick, "status": "refused"})


def _auto_epoch(world: World, tick: int, metrics: MetricsReport) -> None:
    """Runs one epoch when tick has crossed a multiple of the obfuscation period."""
    period = world.scenario.obfuscation_period
    if period == 0 or not world.scenario.flags.obfuscation:
        return
    slot = tick // period
    if slot > world.epoch_slot:
        world.epoch_slot = slot
        _run_epoch(world, tick, metrics)


def _apply(world: World, entry: TimelineEntry, metrics: MetricsReport,
           reports: list[AnyReport]) -> None:
    options = world.scenario.flags.scan_options()
    match entry.action:
        case Action.SCAN_FULL:
            reports.append(full_scan(world.engine, world.fs, world.disk, entry.tick, options))
        case Action.SCAN_INCREMENTAL:
            reports.append(incremental_scan(world.engine, world.fs, world.disk, entry.tick, options))
        case Action.EPOCH:
            _run_epoch(world, entry.tick, metrics)
        case Action.SECOND_OPINION:
            if world.scenario.flags.second_opinion:
                reports.append(second_opinion_scan(_reference(world), world.fs,
                                                   list(world.store.manifest), entry.tick))
            else:
                logger.info("tick %d: second opinion disabled", entry.tick)
        case Action.REPAIR_MBR:
            repair_mbr(world.disk, world.store, world.store.token, world.fs)
        case Action.USER_WRITE:
            id = world.ids[entry.params["file"]]
            size = entry.params.get("size", max(world.fs.entry(id).length, 1))
            world.fs.overwrite_file(id, world.content_rng.bytes(size))
        case Action.SNAPSHOT_KNOWLEDGE:
            world.knowledge = None
            _knowledge(world)
        case _:
            metrics.attacks.append(_apply_attack(world, entry))


def _detected(record: AttackRecord, later: list[AnyReport]) -> bool:
    scans = [r for r in later if isinstance(r, ScanReport)]
    match record.action:
        case Action.TAMPER_SIGNATURE_DB:
            return any(r.compromised for r in scans)
        case Action.REPLACE_AV_EXECUTABLE:
            if not record.replaced:
                # the locator found nothing to replace
                return True
            replaced = set(record.replaced)
            return any(r.compromised for r in scans) or any(
                replaced & {fid for _, fid in r.modified_components}
                for r in later if isinstance(r, SecondOpinionReport))
        case Action.FACADE_MBR:
            return any(r.mbr_status not in (None, MbrStatus.CONSISTENT) for r in scans)
        case _:
            if record.target is None:
                return False
            return any(record.target in r.rootkits
                       or not isinstance(r.verdicts.get(record.target, Clean()), Clean)
                       for r in later)


def judge(record: AttackRecord, reports: list[AnyReport]) -> str:
    if not record.applied:
        return "failed"
    later = [r for r in reports if r.tick > record.tick]
    if _detected(record, later):
        return "defeated"
    return "succeeded" if later else "pending"


def _summarize(metrics: MetricsReport, reports: list[AnyReport]) -> None:
    succeeded = [a.tick for a in metrics.attacks if a.outcome == "succeeded"]
    false_assurances = 0
    for r in reports:
        if isinstance(r, ScanReport) and not r.compromised and succeeded and r.tick > min(succeeded):
            if all(isinstance(v, Clean) for v in r.verdicts.values()):
                false_assurances += 1
    metrics.summary = {
        "detections": sum(a.outcome == "defeated" for a in metrics.attacks),
        "misses": len(succeeded),
        "false_assurances": false_assurances,
        "total_bytes": sum(r.bytes_consumed for r in reports),
    }


def run_scenario(scenario: Scenario, seed: int | None = None,
                 component_sizes: tuple[int, int] | None = None) -> MetricsReport:
    """Builds a world from the scenario and runs its timeline. The result depends only on (scenario, seed)."""
    resolved = resolve_seed(scenario, seed)
    logger.info("scenario '%s' starting with seed %d", scenario.name, resolved)
    world = build_world(scenario, resolved, component_sizes)
    metrics = MetricsReport(scenario.name, resolved)
    reports: list[AnyReport] = []
    for entry in scenario.timeline:
        _auto_epoch(world, entry.tick, metrics)
        try:
            _apply(world, entry, metrics, reports)
        except AvBastionError as e:
            metrics.errors.append({"tick": entry.tick, "action": entry.action.value,
                                   "error": f"{type(e).__name__}: {e}"})
    for record in metrics.attacks:
        record.outcome = judge(record, reports)
    metrics.scans = [r.to_dict() for r in reports]
    _summarize(metrics, reports)
    logger.info("scenario '%s' finished: %s", scenario.name, metrics.summary)
    return metrics


def bundled_scenarios() -> list[str]:
    folder = files("avbastion").joinpath("scenarios")
    return sorted(p.name.removesuffix(".json") for p in folder.iterdir()
                  if p.name.endswith(".json"))


def load_bundled(name: str) -> Scenario:
    text = files("avbastion").joinpath("scenarios", f"{name}.json").read_text()
    return parse_scenario(text, name)


@dataclass
class FuzzReport:
    count: int
    seed: int
    categories: dict[str, int] = field(default_factory=dict)
    verdicts: dict[str, int] = field(default_factory=dict)
    # samples whose consumption passed the bound
    violations: list[str] = field(default_factory=list)
    crashes: list[str] = field(default_factory=list)
    bytes_consumed: int = 0

    @property
    def exit_code(self) -> int:
        if self.crashes:
            return 3
        return 1 if self.violations else 0

    def to_json(self) -> str:
        return json.dumps({
            "count": self.count, "seed": self.seed, "categories": self.categories,
            "verdicts": self.verdicts, "violations": self.violations,
            "crashes": self.crashes, "bytes_consumed": self.bytes_consumed,
        }, sort_keys=True, indent=2) + "\n"


def _within_bound(meter: Meter) -> bool:
    return meter.consumed <= meter.threshold + meter.largest_step


def run_fuzz(count: int, seed: int) -> FuzzReport:
    """Plants each fuzz sample on a fresh install, scans it raw with its own meter, then removes it."""
    world = build_world(Scenario(name="fuzz", disk=DiskSpec(FUZZ_DISK_SECTORS)),
                        seed, component_sizes=(1000, 2000))
    engine, fs = world.engine, world.fs
    report = FuzzReport(count, seed)
    options = world.scenario.flags.scan_options()
    for sample in fuzz_generate(world.attack_rng, count):
        report.categories[sample.category] = report.categories.get(sample.category, 0) + 1
        id = fs.create_file(sample.name, sample.kind, sample.content)
        try:
            meter = new_meter(engine, fs.entry(id), options)
            verdict = scan_file(engine, fs, id, View.RAW, meter)
        except Exception as e:
            report.crashes.append(f"{sample.name}: {type(e).__name__}: {e}")
        else:
            label = type(verdict).__name__.lower()
            report.verdicts[label] = report.verdicts.get(label, 0) + 1
            report.bytes_consumed += meter.consumed
            if not _within_bound(meter):
                report.violations.append(
                    f"{sample.name}: consumed {meter.consumed} over threshold {meter.threshold}")
        fs.delete_file(id)
        engine.state_db.entries.pop(id, None)
        engine.integrity_db.digests.pop(id, None)
        engine.state_db.reseal(engine.store.seal_key)
        engine.integrity_db.reseal(engine.store.seal_key)
    logger.info("fuzz run of %d samples: %s", count, report.verdicts)
    return report
