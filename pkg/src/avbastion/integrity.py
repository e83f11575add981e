"""Hashing, sealing and the three sealed databases (signatures, integrity, scan state).

None of this is cryptography: FNV-1a with a key sandwich is enough to make
a keyless rewrite of a database detectable, which is all the testbed needs.
"""
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum

from avbastion.errors import FormatError, TamperDetected
from avbastion.rng import MASK64, Rng
from avbastion.trusted import TrustedStore
from avbastion.vdisk import AuthToken

logger = logging.getLogger(__name__)

type Digest64 = int
type Seal = int

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
SEAL_SIZE = 8


def fnv64(data: bytes) -> Digest64:
    h, prime, mask = FNV_OFFSET, FNV_PRIME, MASK64
    for b in data:
        h = ((h ^ b) * prime) & mask
    return h


def _key_bytes(key: int) -> bytes:
    return (key & MASK64).to_bytes(8, "little")


def seal(key: int, data: bytes) -> Seal:
    k = _key_bytes(key)
    return fnv64(k + data + k)


def verify_seal(key: int, data: bytes, expected: Seal) -> bool:
    return seal(key, data) == expected


def keystream_transform(key: int, data: bytes) -> bytes:
    """XOR with the SplitMix64 stream seeded by key. Applying it twice gives back the input."""
    if not data:
        return b""
    stream = Rng(key).bytes(len(data))
    mixed = int.from_bytes(data, "little") ^ int.from_bytes(stream, "little")
    return mixed.to_bytes(len(data), "little")


def _split_sealed(data: bytes, key: int, minimum: int, what: str) -> bytes:
    """Checks the trailing seal and returns the body it covers."""
    if len(data) < minimum + SEAL_SIZE:
        raise FormatError(f"{what} of {len(data)} bytes is truncated")
    body, trailer = data[:-SEAL_SIZE], data[-SEAL_SIZE:]
    if not verify_seal(key, body, int.from_bytes(trailer, "little")):
        raise TamperDetected(f"{what} seal does not verify")
    return body


class ScanStatus(Enum):
    UNSCANNED = 0
    ALREADY_SCANNED = 1
    INFECTED = 2
    SUSPICIOUS = 3


@dataclass(frozen=True)
class StateEntry:
    status: ScanStatus = ScanStatus.UNSCANNED
    tick: int = 0


@dataclass
class SignatureDb:
    patterns: dict[tuple[int, int], bytes]
    version: int = 1
    seal: Seal = 0

    def body(self) -> bytes:
        out = bytearray(struct.pack("<II", len(self.patterns), self.version))
        for (family, algorithm) in sorted(self.patterns):
            out += struct.pack("<II", family, algorithm)
            out += self.patterns[(family, algorithm)]
        return bytes(out)

    def reseal(self, key: int) -> None:
        self.seal = seal(key, self.body())

    def verify(self, key: int) -> bool:
        return verify_seal(key, self.body(), self.seal)

    def to_bytes(self) -> bytes:
        return self.body() + self.seal.to_bytes(SEAL_SIZE, "little")


SIG_HEADER = 8
SIG_RECORD = 16


def _parse_signatures(body: bytes, lenient: bool) -> SignatureDb:
    count, version = struct.unpack_from("<II", body, 0)
    available = (len(body) - SIG_HEADER) // SIG_RECORD
    if lenient:
        count = min(count, available)
    elif len(body) != SIG_HEADER + SIG_RECORD * count:
        raise FormatError(
            f"signature db declares {count} records, body has room for {available}")
    patterns: dict[tuple[int, int], bytes] = {}
    for i in range(count):
        offset = SIG_HEADER + SIG_RECORD * i
        family, algorithm = struct.unpack_from("<II", body, offset)
        patterns[(family, algorithm)] = body[offset + 8:offset + 16]
    return SignatureDb(patterns, version)


def encrypt_signatures(db: SignatureDb, definitions_key: int) -> bytes:
    """Definition files are stored encrypted; the seal sits inside the ciphertext."""
    return keystream_transform(definitions_key, db.to_bytes())


def load_signatures(data: bytes, seal_key: int, definitions_key: int, verify: bool = True) -> SignatureDb:
    plain = keystream_transform(definitions_key, data)
    if not verify:
        if len(plain) < SIG_HEADER:
            raise FormatError("signature file shorter than its header")
        body = plain[:-SEAL_SIZE] if len(plain) >= SIG_HEADER + SEAL_SIZE else plain
        db = _parse_signatures(body, lenient=True)
        db.seal = int.from_bytes(plain[-SEAL_SIZE:], "little")
        return db
    body = _split_sealed(plain, seal_key, SIG_HEADER, "signature db")
    db = _parse_signatures(body, lenient=False)
    db.reseal(seal_key)
    return db


@dataclass
class IntegrityDb:
    digests: dict[int, Digest64] = field(default_factory=dict)
    seal: Seal = 0

    def body(self) -> bytes:
        out = bytearray(struct.pack("<I", len(self.digests)))
        for file_id in sorted(self.digests):
            out += struct.pack("<IQ", file_id, self.digests[file_id])
        return bytes(out)

    def reseal(self, key: int) -> None:
        self.seal = seal(key, self.body())

    def verify(self, key: int) -> bool:
        return verify_seal(key, self.body(), self.seal)

    def to_bytes(self) -> bytes:
        return self.body() + self.seal.to_bytes(SEAL_SIZE, "little")


INT_RECORD = 12


def load_integrity(data: bytes, key: int, verify: bool = True) -> IntegrityDb:
    if verify:
        body = _split_sealed(data, key, 4, "integrity db")
    elif len(data) >= 4 + SEAL_SIZE:
        body = data[:-SEAL_SIZE]
    else:
        raise FormatError(f"integrity db of {len(data)} bytes is truncated")
    (count,) = struct.unpack_from("<I", body, 0)
    if not verify:
        count = min(count, (len(body) - 4) // INT_RECORD)
    elif len(body) != 4 + INT_RECORD * count:
        raise FormatError(
            f"integrity db declares {count} records in {len(body)} bytes")
    digests = {}
    for i in range(count):
        file_id, digest = struct.unpack_from("<IQ", body, 4 + INT_RECORD * i)
        digests[file_id] = digest
    return IntegrityDb(digests, seal(key, body))


@dataclass
class StateDb:
    entries: dict[int, StateEntry] = field(default_factory=dict)
    seal: Seal = 0

    def body(self) -> bytes:
        out = bytearray(struct.pack("<I", len(self.entries)))
        for file_id in sorted(self.entries):
            e = self.entries[file_id]
            out += struct.pack("<IBQ", file_id, e.status.value, e.tick)
        return bytes(out)

    def reseal(self, key: int) -> None:
        self.seal = seal(key, self.body())

    def verify(self, key: int) -> bool:
        return verify_seal(key, self.body(), self.seal)

    def to_bytes(self) -> bytes:
        return self.body() + self.seal.to_bytes(SEAL_SIZE, "little")


STATE_RECORD = 13


def parse_state_records(body: bytes) -> dict[int, StateEntry]:
    """Parses the unsealed part of a persisted state db. The layout is public; only the seal key is secret."""
    if len(body) < 4:
        raise FormatError(f"state db of {len(body)} bytes is truncated")
    (count,) = struct.unpack_from("<I", body, 0)
    if len(body) != 4 + STATE_RECORD * count:
        raise FormatError(
            f"state db declares {count} entries in {len(body)} bytes")
    entries = {}
    for i in range(count):
        file_id, status, tick = struct.unpack_from(
            "<IBQ", body, 4 + STATE_RECORD * i)
        if status > ScanStatus.SUSPICIOUS.value:
            raise FormatError(f"state entry {i} has status byte {status}")
        entries[file_id] = StateEntry(ScanStatus(status), tick)
    return entries


def load_state(data: bytes, key: int) -> StateDb:
    body = _split_sealed(data, key, 4, "state db")
    return StateDb(parse_state_records(body), seal(key, body))


def load_state_unverified(data: bytes) -> StateDb:
    """What a state-trusting scanner does: parse and believe."""
    if len(data) < 4 + SEAL_SIZE:
        raise FormatError(f"state db of {len(data)} bytes is truncated")
    return StateDb(parse_state_records(data[:-SEAL_SIZE]),
                   int.from_bytes(data[-SEAL_SIZE:], "little"))


def get_state(db: StateDb, file_id: int) -> StateEntry:
    return db.entries.get(file_id, StateEntry())


def set_state(db: StateDb, file_id: int, status: ScanStatus, tick: int,
              token: AuthToken, store: TrustedStore) -> None:
    store.authorize(token)
    db.entries[file_id] = StateEntry(status, tick)
    db.reseal(store.seal_key)
