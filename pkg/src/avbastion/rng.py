MASK64 = (1 << 64) - 1


class Rng:
    """SplitMix64. The only source of randomness in the testbed."""
    state: int

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Returns an integer in [0, n). Modulo bias is at most n / 2^64."""
        if n <= 0:
            raise ValueError(f"below() needs a positive bound, got {n}")
        return self.next_u64() % n

    def chance(self, numerator: int, denominator: int) -> bool:
        return self.below(denominator) < numerator

    def bytes(self, n: int) -> bytes:
        """n bytes taken from successive outputs, 8 little-endian bytes each."""
        words = (n + 7) // 8
        stream = b"".join(self.next_u64().to_bytes(8, "little")
                          for _ in range(words))
        return stream[:n]

    def fork(self) -> "Rng":
        """Independent child stream, so one consumer's draws do not shift another's."""
        return Rng(self.next_u64())
