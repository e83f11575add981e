import logging
from dataclasses import dataclass
from typing import Iterable

from avbastion.errors import (BadLength, InvalidGeometry, OutOfRange,
                              Unauthorized)

logger = logging.getLogger(__name__)

type SectorIndex = int

DEFAULT_SECTOR_SIZE = 512
MIN_SECTORS = 8
MIN_SECTOR_SIZE = 64


@dataclass(frozen=True)
class AuthToken:
    """64-bit secret issued by the TrustedStore at install."""
    value: int


class VirtualDisk:
    """Sector array with a protected archive bit per sector and a redirectable boot pointer.

    Writes are open to everyone and always set the archive bits of the sectors
    they touch. Reading or clearing the bits needs the token enrolled at install.
    """
    sector_count: int
    sector_size: int
    boot_pointer: SectorIndex
    _data: bytearray
    _archive_bits: bytearray
    _free_map: bytearray
    _token: AuthToken | None

    def __init__(self, sector_count: int, sector_size: int = DEFAULT_SECTOR_SIZE) -> None:
        if sector_count < MIN_SECTORS or sector_size < MIN_SECTOR_SIZE:
            raise InvalidGeometry(
                f"need at least {MIN_SECTORS} sectors of {MIN_SECTOR_SIZE} bytes, "
                f"got {sector_count} x {sector_size}")
        self.sector_count = sector_count
        self.sector_size = sector_size
        self.boot_pointer = 0
        self._data = bytearray(sector_count * sector_size)
        self._archive_bits = bytearray(sector_count)
        self._free_map = bytearray(sector_count)
        # sector 0 is the MBR
        self._free_map[0] = 1
        self._token = None

    def _check_range(self, start: SectorIndex, n: int) -> None:
        if start < 0 or n < 0 or start + n > self.sector_count:
            raise OutOfRange(
                f"sectors {start}..{start + n - 1} outside disk of {self.sector_count} sectors")

    def _authorize(self, token: AuthToken) -> None:
        if self._token is None or token != self._token:
            raise Unauthorized("archive bits need the installed auth token")

    def enroll(self, token: AuthToken) -> None:
        """Binds the trusted token to this disk. Only the first enrollment counts."""
        if self._token is not None:
            raise Unauthorized("disk already has an enrolled token")
        self._token = token

    def write_sectors(self, start: SectorIndex, data: bytes) -> None:
        if len(data) % self.sector_size != 0:
            raise BadLength(
                f"write of {len(data)} bytes is not a multiple of {self.sector_size}")
        n = len(data) // self.sector_size
        self._check_range(start, n)
        offset = start * self.sector_size
        self._data[offset:offset + len(data)] = data
        for i in range(start, start + n):
            self._archive_bits[i] = 1

    def read_sectors_raw(self, start: SectorIndex, n: int) -> bytes:
        """Physical bytes. Ignores the boot pointer and every other indirection."""
        self._check_range(start, n)
        offset = start * self.sector_size
        return bytes(self._data[offset:offset + n * self.sector_size])

    def read_mbr_standard(self) -> bytes:
        """The standard-BIOS view of the MBR: whatever sector the boot pointer names."""
        return self.read_sectors_raw(self.boot_pointer, 1)

    def set_boot_pointer(self, sector: SectorIndex) -> None:
        self._check_range(sector, 1)
        self.boot_pointer = sector

    def changed_sectors(self, token: AuthToken) -> set[SectorIndex]:
        self._authorize(token)
        return {i for i, bit in enumerate(self._archive_bits) if bit}

    def clear_archive_bits(self, sectors: Iterable[SectorIndex], token: AuthToken) -> None:
        self._authorize(token)
        sectors = list(sectors)
        for i in sectors:
            self._check_range(i, 1)
        for i in sectors:
            self._archive_bits[i] = 0

    def allocate(self, n: int) -> list[SectorIndex]:
        """Marks the n lowest free sectors allocated. Caller checks free_count() first."""
        picked: list[SectorIndex] = []
        for i in range(self.sector_count):
            if len(picked) == n:
                break
            if not self._free_map[i]:
                picked.append(i)
        if len(picked) < n:
            raise OutOfRange(f"only {len(picked)} free sectors, wanted {n}")
        for i in picked:
            self._free_map[i] = 1
        return picked

    def release(self, sectors: Iterable[SectorIndex]) -> None:
        for i in sectors:
            self._check_range(i, 1)
            if i == 0:
                continue
            self._free_map[i] = 0

    def free_count(self) -> int:
        return self.sector_count - sum(self._free_map)

    def is_allocated(self, sector: SectorIndex) -> bool:
        self._check_range(sector, 1)
        return bool(self._free_map[sector])


def disk_new(sector_count: int, sector_size: int = DEFAULT_SECTOR_SIZE) -> VirtualDisk:
    return VirtualDisk(sector_count, sector_size)
