import pytest

from avbastion.rng import MASK64, Rng


def test_splitmix64_reference_stream() -> None:
    rng = Rng(0)
    assert rng.next_u64() == 0xE220A8397B1DCDAF
    assert rng.next_u64() == 0x6E789E6AA1B965F4
    assert rng.next_u64() == 0x06C45D188009454F


def test_same_seed_same_stream() -> None:
    a, b = Rng(12345), Rng(12345)
    assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]
    assert Rng(1).next_u64() != Rng(2).next_u64()


def test_seed_is_masked_to_64_bits() -> None:
    assert Rng(MASK64 + 1 + 7).next_u64() == Rng(7).next_u64()


def test_below() -> None:
    rng = Rng(3)
    assert all(0 <= rng.below(6) < 6 for _ in range(1000))
    assert rng.below(1) == 0
    with pytest.raises(ValueError):
        rng.below(0)


def test_bytes_follow_the_stream() -> None:
    a, b = Rng(9), Rng(9)
    data = a.bytes(12)
    assert len(data) == 12
    assert data[:8] == b.next_u64().to_bytes(8, "little")
    assert data[8:] == b.next_u64().to_bytes(8, "little")[:4]
    assert Rng(9).bytes(0) == b""


def test_fork_is_independent_of_later_parent_draws() -> None:
    parent = Rng(77)
    child = parent.fork()
    first = child.next_u64()
    parent.next_u64()
    again = Rng(77).fork()
    assert again.next_u64() == first
