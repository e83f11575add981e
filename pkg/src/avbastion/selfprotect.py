"""Polymorphic installation, obfuscation of the AV's own files, and the defense catalog."""
import logging
import struct
from dataclasses import dataclass
from enum import Enum

from avbastion.errors import InvalidK, SelfCheckFailed, TamperDetected
from avbastion.fstore import FileStore, View
from avbastion.integrity import fnv64, keystream_transform, seal
from avbastion.rng import Rng
from avbastion.trusted import TrustedStore

logger = logging.getLogger(__name__)

PAD_BLOCK = 4096
# pad multiples drawn from [0, PAD_MULTIPLES); keeps the growth under 65,536 bytes
PAD_MULTIPLES = 15
FOOTER_SIZE = 8
NAME_HEX_DIGITS = 12


def select_algorithms(seed: int, n: int, k: int) -> frozenset[int]:
    """Partial Fisher-Yates shuffle of 0..n-1, keeping the first k."""
    if not 1 <= k <= n:
        raise InvalidK(f"k must be in 1..{n}, got {k}")
    rng = Rng(seed)
    ids = list(range(n))
    for i in range(k):
        j = i + rng.below(n - i)
        ids[i], ids[j] = ids[j], ids[i]
    return frozenset(ids[:k])


def distinct_install_seed(rng: Rng, n: int, k: int, avoid: frozenset[int]) -> int:
    """Draws install seeds until one selects a subset other than avoid.

    With k == n there is only one subset, so the first draw is returned.
    """
    seed = rng.next_u64()
    if k == n:
        return seed
    while select_algorithms(seed, n, k) == avoid:
        seed = rng.next_u64()
    return seed


def manifest_bytes(store: TrustedStore) -> bytes:
    out = bytearray(struct.pack("<I", store.epoch))
    for e in store.manifest:
        role = e.role.encode()
        name = e.name.encode()
        out += struct.pack("<H", len(role)) + role
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<IQQIQ", e.file_id, e.digest,
                           e.original_digest, e.epoch, e.epoch_key)
    return bytes(out)


def reseal_manifest(store: TrustedStore) -> None:
    store.manifest_seal = seal(store.seal_key, manifest_bytes(store))


def verify_manifest(fs: FileStore, store: TrustedStore) -> bool:
    """Self-check: every component's raw bytes hash to the digest the trusted side recorded."""
    if seal(store.seal_key, manifest_bytes(store)) != store.manifest_seal:
        return False
    for entry in store.manifest:
        f = fs.find(entry.name)
        if f is None or f.id != entry.file_id:
            return False
        if fnv64(fs.read_file(entry.file_id, View.RAW)) != entry.digest:
            return False
    return True


def _fresh_name(fs: FileStore, rng: Rng) -> str:
    while True:
        name = f"{rng.next_u64() & ((1 << 48) - 1):0{NAME_HEX_DIGITS}x}"
        if fs.find(name) is None:
            return name


def deobfuscate_component(fs: FileStore, store: TrustedStore, role: str) -> bytes:
    entry = store.component(role)
    data = fs.read_file(entry.file_id, View.RAW)
    if fnv64(data) != entry.digest:
        raise TamperDetected(f"component '{role}' does not match its manifest digest")
    if entry.epoch == 0:
        original = data
    else:
        if len(data) < FOOTER_SIZE:
            raise TamperDetected(f"component '{role}' lost its length footer")
        true_length = int.from_bytes(data[-FOOTER_SIZE:], "little")
        if true_length > len(data) - FOOTER_SIZE:
            raise TamperDetected(
                f"component '{role}' footer claims {true_length} bytes")
        original = keystream_transform(entry.epoch_key, data[:true_length])
    if fnv64(original) != entry.original_digest:
        raise TamperDetected(f"component '{role}' did not recover to its original bytes")
    return original


def obfuscate_epoch(fs: FileStore, store: TrustedStore, rng: Rng) -> None:
    """Renames, re-encodes, pads and maybe relocates every AV component, then updates the manifest."""
    if not verify_manifest(fs, store):
        raise SelfCheckFailed("refusing to obfuscate a compromised install")
    for entry in store.manifest:
        original = deobfuscate_component(fs, store, entry.role)
        key = rng.next_u64()
        encoded = keystream_transform(key, original)
        total = -(-(len(encoded) + FOOTER_SIZE) // PAD_BLOCK) * PAD_BLOCK
        total += PAD_BLOCK * rng.below(PAD_MULTIPLES)
        pad_length = total - len(encoded) - FOOTER_SIZE
        pad = (rng.bytes(8) * (pad_length // 8 + 1))[:pad_length]
        content = encoded + pad + len(encoded).to_bytes(FOOTER_SIZE, "little")

        name = _fresh_name(fs, rng)
        fs.rename_file(entry.file_id, name)
        fs.overwrite_file(entry.file_id, content, relocate=rng.chance(1, 2))

        entry.name = name
        entry.digest = fnv64(content)
        entry.epoch += 1
        entry.epoch_key = key
    store.epoch += 1
    reseal_manifest(store)
    logger.info("obfuscation epoch %d over %d components",
                store.epoch, len(store.manifest))


class TrizStandard(Enum):
    INTRODUCE_SUBSTANCE = "1.2.1"
    MODIFY_SUBSTANCE = "1.2.2"
    ABSORB_HARM = "1.2.3"
    INTRODUCE_FIELD = "1.2.4"


@dataclass(frozen=True)
class DefenseEntry:
    """One defense mechanism with its TRIZ tags and the switch that turns it off.

    S1 is always the anti-virus and S2 the virus; introduced says what S3
    (or the field F2) is for this mechanism.
    """
    name: str
    introduced: str
    standard: TrizStandard
    principles: tuple[int, ...]
    counters: str
    flag: str | None = None
    off_value: bool | None = None
    scenario: str | None = None


DEFENSE_CATALOG: tuple[DefenseEntry, ...] = (
    DefenseEntry("archive_bits", "S3: protected per-sector archive bits",
                 TrizStandard.INTRODUCE_SUBSTANCE, (), "attack.flip_state",
                 "trust_state_db", True, "stateflip"),
    DefenseEntry("sealed_databases", "S3: keyed seals over the databases",
                 TrizStandard.INTRODUCE_SUBSTANCE, (), "attack.tamper_signature_db",
                 "verify_seals", False, "sigtamper"),
    DefenseEntry("self_check", "S3: manifest digests kept in the trusted store",
                 TrizStandard.INTRODUCE_SUBSTANCE, (), "attack.replace_av_executable",
                 "skip_self_check", True, "replace"),
    DefenseEntry("second_opinion_scan", "S3: an independent engine from outside the host",
                 TrizStandard.INTRODUCE_SUBSTANCE, (), "attack.replace_av_executable",
                 "second_opinion", False, "second_opinion"),
    DefenseEntry("obfuscation", "S3 from S1: renamed, re-encoded, resized AV files",
                 TrizStandard.MODIFY_SUBSTANCE, (35, 36), "attack.replace_av_executable",
                 "obfuscation", False, "obfuscation"),
    DefenseEntry("polymorphic_install", "S3 from S1: a different algorithm subset per install",
                 TrizStandard.MODIFY_SUBSTANCE, (35,), "attack.infect",
                 "polymorphic", False, "evasion"),
    DefenseEntry("budget", "S3: measurement value that absorbs bait-file expansion",
                 TrizStandard.ABSORB_HARM, (9, 16), "attack.plant_bomb",
                 "budget", False, "bomb"),
    DefenseEntry("trusted_bios", "F2: raw sector read that bypasses the boot pointer",
                 TrizStandard.INTRODUCE_FIELD, (), "attack.facade_mbr",
                 "trusted_bios", False, "facade"),
    DefenseEntry("rootkit_sweep", "F2: raw-view scanning after a cross-view diff",
                 TrizStandard.INTRODUCE_FIELD, (), "attack.install_rootkit",
                 "rootkit_sweep", False, "rootkit"),
    DefenseEntry("trusted_store", "S3: key and manifest storage no attack can reach",
                 TrizStandard.INTRODUCE_SUBSTANCE, (), "all attacks"),
)


def defense(name: str) -> DefenseEntry:
    for d in DEFENSE_CATALOG:
        if d.name == name:
            return d
    raise KeyError(f"no defense named '{name}'")
