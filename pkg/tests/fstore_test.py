import struct

import pytest
from hypothesis import given, strategies as st

from avbastion.budget import BudgetPolicy, Meter, meter_new
from avbastion.errors import (DiskFull, DuplicateName, FormatError,
                              UnknownFile)
from avbastion.fstore import (MAX_RUN, RLE_MAGIC, FileKind, FileStore,
                              RleContainer, View, rle_compress,
                              rle_decompress_stream)
from avbastion.vdisk import AuthToken, disk_new

TOKEN = AuthToken(42)


def store(sectors: int = 64, size: int = 64) -> FileStore:
    disk = disk_new(sectors, size)
    disk.enroll(TOKEN)
    return FileStore(disk)


def test_create_and_read() -> None:
    fs = store()
    id = fs.create_file("a.txt", FileKind.DATA, b"hello" * 30)
    e = fs.entry(id)
    assert e.length == 150
    assert len(e.sectors) == 3
    assert 0 not in e.sectors
    assert fs.read_file(id, View.RAW) == b"hello" * 30
    assert fs.read_file(id, View.STANDARD) == b"hello" * 30
    assert fs.find("a.txt") == e
    assert fs.find("b.txt") is None


def test_create_errors() -> None:
    fs = store(sectors=8)
    fs.create_file("a", FileKind.DATA, b"x")
    with pytest.raises(DuplicateName):
        fs.create_file("a", FileKind.DATA, b"y")
    with pytest.raises(DiskFull):
        fs.create_file("big", FileKind.DATA, bytes(64 * 7))
    with pytest.raises(UnknownFile):
        fs.read_file(99, View.RAW)


def test_empty_file() -> None:
    fs = store()
    id = fs.create_file("empty", FileKind.DATA, b"")
    assert fs.entry(id).sectors == []
    assert fs.read_file(id, View.RAW) == b""


def test_overwrite_grows_and_shrinks() -> None:
    fs = store()
    id = fs.create_file("f", FileKind.DATA, bytes(100))
    first = list(fs.entry(id).sectors)
    fs.overwrite_file(id, b"\x07" * 300)
    assert fs.entry(id).sectors[:2] == first
    assert fs.read_file(id, View.RAW) == b"\x07" * 300
    fs.overwrite_file(id, b"\x01" * 10)
    assert fs.entry(id).sectors == first[:1]
    assert fs.read_file(id, View.RAW) == b"\x01" * 10
    assert not fs.disk.is_allocated(first[1])


def test_overwrite_marks_sectors_dirty() -> None:
    fs = store()
    id = fs.create_file("f", FileKind.DATA, bytes(128))
    fs.disk.clear_archive_bits(fs.entry(id).sectors, TOKEN)
    assert fs.disk.changed_sectors(TOKEN) == set()
    fs.overwrite_file(id, b"\x01" * 128)
    assert fs.disk.changed_sectors(TOKEN) == set(fs.entry(id).sectors)


def test_relocate_uses_fresh_sectors() -> None:
    fs = store()
    id = fs.create_file("f", FileKind.DATA, bytes(128))
    old = set(fs.entry(id).sectors)
    fs.overwrite_file(id, b"\x02" * 200, relocate=True)
    assert not old & set(fs.entry(id).sectors)
    assert fs.read_file(id, View.RAW) == b"\x02" * 200
    assert not any(fs.disk.is_allocated(s) for s in old)


def test_rename_and_delete() -> None:
    fs = store()
    a = fs.create_file("a", FileKind.DATA, b"1")
    b = fs.create_file("b", FileKind.DATA, b"2")
    with pytest.raises(DuplicateName):
        fs.rename_file(a, "b")
    fs.rename_file(a, "c")
    assert fs.find("c") is not None and fs.find("a") is None
    sector = fs.entry(b).sectors[0]
    fs.delete_file(b)
    assert not fs.disk.is_allocated(sector)
    with pytest.raises(UnknownFile):
        fs.entry(b)
    assert [e.id for e in fs.files()] == [a]


def test_interceptor_only_changes_the_standard_view() -> None:
    fs = store()
    id = fs.create_file("f", FileKind.EXECUTABLE, b"infected")
    fs.install_interceptor(id, b"clean")
    assert fs.read_file(id, View.STANDARD) == b"clean"
    assert fs.read_file(id, View.RAW) == b"infected"
    fs.remove_interceptor(id)
    assert fs.read_file(id, View.STANDARD) == b"infected"
    with pytest.raises(UnknownFile):
        fs.install_interceptor(99, b"")


def test_rle_layout() -> None:
    c = rle_compress(b"aaab")
    assert c.runs == ((3, ord("a")), (1, ord("b")))
    assert c.to_bytes() == RLE_MAGIC + struct.pack("<I", 2) + struct.pack("<HBHB", 3, 97, 1, 98)
    assert c.decompressed_size() == 4


def test_rle_splits_long_runs() -> None:
    c = rle_compress(bytes(MAX_RUN + 5))
    assert c.runs == ((MAX_RUN, 0), (5, 0))


def test_from_runs_validates() -> None:
    with pytest.raises(ValueError):
        RleContainer.from_runs([(0, 1)])
    with pytest.raises(ValueError):
        RleContainer.from_runs([(MAX_RUN + 1, 1)])
    with pytest.raises(ValueError):
        RleContainer.from_runs([(1, 256)])


@given(st.binary(max_size=2000))
def test_compress_then_decompress(data: bytes) -> None:
    out = rle_decompress_stream(rle_compress(data).to_bytes(), Meter.unlimited())
    assert out.data == data
    assert not out.broke


def test_malformed_containers() -> None:
    good = RleContainer(((3, 1), (4, 2))).to_bytes()
    for bad in (b"RLE", b"XLE1" + good[4:], good[:-1], good + b"\x00",
                RLE_MAGIC + struct.pack("<I", 3) + good[8:],
                RLE_MAGIC + struct.pack("<I", 1) + struct.pack("<HB", 0, 9)):
        with pytest.raises(FormatError):
            rle_decompress_stream(bad, Meter.unlimited())


def test_malformed_container_does_no_work() -> None:
    meter = Meter.unlimited()
    bad = RLE_MAGIC + struct.pack("<I", 2) + struct.pack("<HBHB", 100, 1, 0, 2)
    with pytest.raises(FormatError):
        rle_decompress_stream(bad, meter)
    assert meter.consumed == 0


def test_bomb_breaks_within_one_run_of_the_threshold() -> None:
    bomb = RleContainer.from_runs([(MAX_RUN, 0)] * 160).to_bytes()
    assert len(bomb) == 488
    meter = meter_new(BudgetPolicy(), len(bomb))
    out = rle_decompress_stream(bomb, meter)
    assert out.broke
    assert meter.consumed <= meter.threshold + MAX_RUN
    assert len(out.data) == meter.consumed


def test_empty_container_is_valid() -> None:
    out = rle_decompress_stream(RleContainer(()).to_bytes(), Meter.unlimited())
    assert out.data == b""
    assert not out.broke
