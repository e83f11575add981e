import logging
from dataclasses import dataclass
from enum import Enum

logger = logging.getLogger(__name__)

DEFAULT_BASE_THRESHOLD = 65_536
DEFAULT_SIZE_FACTOR = 4
# saturation ceiling, also the threshold of an unlimited meter
MAX_BYTES = (1 << 64) - 1


class Step(Enum):
    CONTINUE = "continue"
    BREAK = "break"


@dataclass(frozen=True)
class BudgetPolicy:
    """Threshold T = base_threshold + size_factor * declared size."""
    base_threshold: int = DEFAULT_BASE_THRESHOLD
    size_factor: float = DEFAULT_SIZE_FACTOR

    def __post_init__(self) -> None:
        if self.base_threshold < 1:
            raise ValueError(
                f"base_threshold must be at least 1, got {self.base_threshold}")
        if self.size_factor < 0:
            raise ValueError(
                f"size_factor must not be negative, got {self.size_factor}")


def threshold_bytes(policy: BudgetPolicy, declared_size: int) -> int:
    t = policy.base_threshold + int(policy.size_factor * declared_size)
    return min(t, MAX_BYTES)


@dataclass
class Meter:
    """Measurement value of one scan. Trips the first time consumption exceeds the threshold."""
    threshold: int
    consumed: int = 0
    tripped: bool = False
    largest_step: int = 0

    def consume(self, n: int) -> Step:
        if n < 0:
            raise ValueError(f"cannot consume a negative amount ({n})")
        self.consumed = min(self.consumed + n, MAX_BYTES)
        self.largest_step = max(self.largest_step, n)
        if not self.tripped and self.consumed > self.threshold:
            self.tripped = True
            logger.info("budget break at %d bytes (threshold %d)",
                        self.consumed, self.threshold)
        return Step.BREAK if self.tripped else Step.CONTINUE

    @classmethod
    def unlimited(cls) -> "Meter":
        return cls(threshold=MAX_BYTES)


def meter_new(policy: BudgetPolicy, declared_size: int) -> Meter:
    return Meter(threshold=threshold_bytes(policy, declared_size))
