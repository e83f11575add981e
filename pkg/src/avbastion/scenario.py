"""Scenario documents: parsing and validation.

A scenario is a JSON object describing a world (disk, catalog, install,
budget, defense flags, files) and a timeline of actions at strictly
increasing ticks. Every problem found is reported with its JSON path.
"""
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from avbastion.budget import (DEFAULT_BASE_THRESHOLD, DEFAULT_SIZE_FACTOR,
                              BudgetPolicy)
from avbastion.engine import ScanOptions
from avbastion.errors import SchemaError
from avbastion.fstore import FileKind
from avbastion.vdisk import DEFAULT_SECTOR_SIZE, MIN_SECTOR_SIZE, MIN_SECTORS

DEFAULT_SECTORS = 4096
DEFAULT_ALGORITHMS = 8
DEFAULT_FAMILIES = 4
DEFAULT_K = 3
DEFAULT_OBFUSCATION_PERIOD = 10
DEFAULT_BOMB_RUNS = 160
U64_MAX = (1 << 64) - 1


class Action(Enum):
    SCAN_FULL = "scan.full"
    SCAN_INCREMENTAL = "scan.incremental"
    EPOCH = "epoch"
    SECOND_OPINION = "second_opinion"
    REPAIR_MBR = "repair_mbr"
    USER_WRITE = "user.write"
    SNAPSHOT_KNOWLEDGE = "attack.snapshot_knowledge"
    INFECT = "attack.infect"
    FLIP_STATE = "attack.flip_state"
    TAMPER_SIGNATURE_DB = "attack.tamper_signature_db"
    REPLACE_AV_EXECUTABLE = "attack.replace_av_executable"
    PLANT_BOMB = "attack.plant_bomb"
    FACADE_MBR = "attack.facade_mbr"
    INSTALL_ROOTKIT = "attack.install_rootkit"

    @property
    def is_attack(self) -> bool:
        return self.value.startswith("attack.") and self != Action.SNAPSHOT_KNOWLEDGE


# actions whose "file" parameter must name a defined file
FILE_ACTIONS = {Action.USER_WRITE, Action.INFECT,
                Action.FLIP_STATE, Action.INSTALL_ROOTKIT}
EXPECTATIONS = ("defeated", "succeeded")


@dataclass(frozen=True)
class DiskSpec:
    sectors: int = DEFAULT_SECTORS
    sector_size: int = DEFAULT_SECTOR_SIZE


@dataclass(frozen=True)
class Flags:
    """Defense switches. Every default is the defense turned on."""
    trust_state_db: bool = False
    skip_self_check: bool = False
    verify_seals: bool = True
    budget: bool = True
    trusted_bios: bool = True
    rootkit_sweep: bool = True
    obfuscation: bool = True
    polymorphic: bool = True
    second_opinion: bool = True

    def scan_options(self) -> ScanOptions:
        return ScanOptions(trust_state_db=self.trust_state_db,
                           skip_self_check=self.skip_self_check,
                           verify_seals=self.verify_seals,
                           budget=self.budget,
                           trusted_bios=self.trusted_bios,
                           rootkit_sweep=self.rootkit_sweep)


FLAG_NAMES = tuple(Flags.__dataclass_fields__)


@dataclass(frozen=True)
class FileSpec:
    name: str
    kind: FileKind
    size: int
    # None means random bytes of the given size
    content: bytes | None = None


@dataclass(frozen=True)
class TimelineEntry:
    tick: int
    action: Action
    params: dict[str, Any] = field(default_factory=dict)
    expect: str | None = None


@dataclass(frozen=True)
class Scenario:
    name: str = ""
    seed: int | None = None
    disk: DiskSpec = DiskSpec()
    algorithms: int = DEFAULT_ALGORITHMS
    families: int = DEFAULT_FAMILIES
    k: int = DEFAULT_K
    budget: BudgetPolicy = BudgetPolicy()
    flags: Flags = Flags()
    obfuscation_period: int = DEFAULT_OBFUSCATION_PERIOD
    second_opinion_k: int = DEFAULT_K
    files: tuple[FileSpec, ...] = ()
    timeline: tuple[TimelineEntry, ...] = ()

    def with_flags(self, **changes: bool) -> "Scenario":
        return replace(self, flags=replace(self.flags, **changes))


def parse_scenario(text: str, name: str = "") -> Scenario:
    """Returns a validated Scenario, or raises SchemaError listing every issue."""
    issues: list[tuple[str, str]] = []

    def issue(path: str, message: str) -> None:
        issues.append((path, message))

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError([("$", f"invalid JSON: {e}")]) from e
    if not isinstance(doc, dict):
        raise SchemaError([("$", f"expected an object, but got {type(doc).__name__}")])

    def get_object(parent: dict[str, Any], key: str, path: str) -> dict[str, Any]:
        value = parent.get(key, {})
        if not isinstance(value, dict):
            issue(f"{path}.{key}", "expected an object")
            return {}
        return value

    def get_int(obj: dict[str, Any], key: str, path: str, default: int,
                minimum: int = 0, maximum: int = U64_MAX) -> int:
        value = obj.get(key, default)
        # bool is an int subclass
        if isinstance(value, bool) or not isinstance(value, int):
            issue(f"{path}.{key}", f"expected an integer, but got {value!r}")
            return default
        if not minimum <= value <= maximum:
            issue(f"{path}.{key}", f"{value} is outside {minimum}..{maximum}")
            return default
        return value

    def get_bool(obj: dict[str, Any], key: str, path: str, default: bool) -> bool:
        value = obj.get(key, default)
        if not isinstance(value, bool):
            issue(f"{path}.{key}", f"expected true or false, but got {value!r}")
            return default
        return value

    def get_str(obj: dict[str, Any], key: str, path: str, default: str | None = None) -> str:
        value = obj.get(key, default)
        if not isinstance(value, str) or not value:
            issue(f"{path}.{key}", f"expected a non-empty string, but got {value!r}")
            return default or ""
        return value

    def get_kind(obj: dict[str, Any], path: str) -> FileKind:
        value = obj.get("kind", FileKind.DATA.value)
        kinds = [k.value for k in FileKind if k != FileKind.AV_COMPONENT]
        if value not in kinds:
            issue(f"{path}.kind", f"expected one of: {', '.join(kinds)}, but got {value!r}")
            return FileKind.DATA
        return FileKind(value)

    known = {"seed", "disk", "catalog", "install", "budget", "flags",
             "obfuscation", "second_opinion", "files", "timeline", "name"}
    for key in doc:
        if key not in known:
            issue(f"$.{key}", "unknown key")

    scenario_name = doc.get("name", name)
    if not isinstance(scenario_name, str):
        issue("$.name", f"expected a string, but got {scenario_name!r}")
        scenario_name = name

    seed: int | None = None
    if "seed" in doc:
        seed = get_int(doc, "seed", "$", 0)

    d = get_object(doc, "disk", "$")
    disk = DiskSpec(get_int(d, "sectors", "$.disk", DEFAULT_SECTORS, MIN_SECTORS),
                    get_int(d, "sector_size", "$.disk", DEFAULT_SECTOR_SIZE, MIN_SECTOR_SIZE))

    c = get_object(doc, "catalog", "$")
    algorithms = get_int(c, "algorithms", "$.catalog", DEFAULT_ALGORITHMS, 1, 64)
    families = get_int(c, "families", "$.catalog", DEFAULT_FAMILIES, 1, 1024)
    k = get_int(get_object(doc, "install", "$"), "k", "$.install", DEFAULT_K, 1, 64)
    if k > algorithms:
        issue("$.install.k", f"k {k} is more than the {algorithms} catalog algorithms")
    second_opinion_k = get_int(get_object(doc, "second_opinion", "$"), "k",
                               "$.second_opinion", min(k, algorithms), 1, 64)
    if second_opinion_k > algorithms:
        issue("$.second_opinion.k",
              f"k {second_opinion_k} is more than the {algorithms} catalog algorithms")

    b = get_object(doc, "budget", "$")
    alpha = b.get("alpha", DEFAULT_SIZE_FACTOR)
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or alpha < 0:
        issue("$.budget.alpha", f"expected a non-negative number, but got {alpha!r}")
        alpha = DEFAULT_SIZE_FACTOR
    budget = BudgetPolicy(get_int(b, "b0", "$.budget", DEFAULT_BASE_THRESHOLD, 1), alpha)

    f = get_object(doc, "flags", "$")
    for key in f:
        if key not in FLAG_NAMES:
            issue(f"$.flags.{key}", "unknown flag")
    defaults = Flags()
    flags = Flags(**{n: get_bool(f, n, "$.flags", getattr(defaults, n)) for n in FLAG_NAMES})

    period = get_int(get_object(doc, "obfuscation", "$"), "period", "$.obfuscation",
                     DEFAULT_OBFUSCATION_PERIOD)

    files: list[FileSpec] = []
    raw_files = doc.get("files", [])
    if not isinstance(raw_files, list):
        issue("$.files", "expected a list")
        raw_files = []
    for i, spec in enumerate(raw_files):
        path = f"$.files[{i}]"
        if not isinstance(spec, dict):
            issue(path, "expected an object")
            continue
        if "generate" in spec:
            g = get_object(spec, "generate", path)
            gpath = f"{path}.generate"
            count = get_int(g, "count", gpath, 1, 1, 100_000)
            prefix = get_str(g, "prefix", gpath, "file")
            size = get_int(g, "size", gpath, 1024, 1)
            kind = get_kind(g, gpath)
            files.extend(FileSpec(f"{prefix}{n:04d}", kind, size) for n in range(count))
            continue
        name = get_str(spec, "name", path)
        kind = get_kind(spec, path)
        if "content_hex" in spec:
            try:
                content = bytes.fromhex(spec["content_hex"])
            except (TypeError, ValueError):
                issue(f"{path}.content_hex", "expected a hex string")
                content = b""
            files.append(FileSpec(name, kind, len(content), content))
        else:
            files.append(FileSpec(name, kind, get_int(spec, "size", path, 1024)))

    names = [s.name for s in files]
    seen: set[str] = set()
    for i, n in enumerate(names):
        if n in seen:
            issue(f"$.files[{i}].name", f"duplicate file name '{n}'")
        seen.add(n)

    timeline: list[TimelineEntry] = []
    raw_timeline = doc.get("timeline", [])
    if not isinstance(raw_timeline, list):
        issue("$.timeline", "expected a list")
        raw_timeline = []
    last_tick = -1
    for i, step in enumerate(raw_timeline):
        path = f"$.timeline[{i}]"
        if not isinstance(step, dict):
            issue(path, "expected an object")
            continue
        tick = get_int(step, "tick", path, last_tick + 1)
        if tick <= last_tick:
            issue(f"{path}.tick", f"tick {tick} does not increase on tick {last_tick}")
        last_tick = max(tick, last_tick)

        action_name = step.get("action")
        try:
            action = Action(action_name)
        except ValueError:
            issue(f"{path}.action", f"unknown action {action_name!r}")
            continue

        params: dict[str, Any] = {}
        if action in FILE_ACTIONS:
            target = get_str(step, "file", path)
            if target and target not in seen:
                issue(f"{path}.file", f"file '{target}' is not defined")
            params["file"] = target
        match action:
            case Action.INFECT:
                params["family"] = get_int(step, "family", path, 0, 0, families - 1)
                evades = step.get("evades", [])
                if not isinstance(evades, list) or not all(
                        isinstance(a, int) and not isinstance(a, bool) and 0 <= a < algorithms
                        for a in evades):
                    issue(f"{path}.evades", f"expected algorithm ids below {algorithms}")
                    evades = []
                params["evades"] = frozenset(evades)
                params["evade_studied_install"] = get_bool(step, "evade_studied_install", path, False)
            case Action.PLANT_BOMB:
                params["runs"] = get_int(step, "runs", path, DEFAULT_BOMB_RUNS, 1, 1_000_000)
                params["value"] = get_int(step, "value", path, 0, 0, 255)
                bomb_name = get_str(step, "name", path, "invoice.rle")
                if bomb_name in seen:
                    issue(f"{path}.name", f"duplicate file name '{bomb_name}'")
                seen.add(bomb_name)
                params["name"] = bomb_name
            case Action.USER_WRITE:
                if "size" in step:
                    params["size"] = get_int(step, "size", path, 1, 1)
            case _:
                pass

        expect = step.get("expect")
        if expect is not None:
            if not action.is_attack:
                issue(f"{path}.expect", f"only attacks take an expectation, not {action.value}")
                expect = None
            elif expect not in EXPECTATIONS:
                issue(f"{path}.expect", f"expected one of: {', '.join(EXPECTATIONS)}, but got {expect!r}")
                expect = None
        timeline.append(TimelineEntry(tick, action, params, expect))

    if issues:
        raise SchemaError(issues)
    return Scenario(
        name=scenario_name,
        seed=seed, disk=disk, algorithms=algorithms, families=families, k=k,
        budget=budget, flags=flags, obfuscation_period=period,
        second_opinion_k=second_opinion_k, files=tuple(files), timeline=tuple(timeline))
