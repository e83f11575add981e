"""Attack x defense matrix: every cataloged defense run on and off against its attack."""
import logging
from dataclasses import dataclass

from avbastion.runner import MetricsReport, load_bundled, run_scenario
from avbastion.selfprotect import DEFENSE_CATALOG, DefenseEntry

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatrixRow:
    defense: str
    attack: str
    scenario: str
    on_detected: bool
    off_detected: bool

    @property
    def ok(self) -> bool:
        """The defense defeats its attack, and turning it off lets the attack through."""
        return self.on_detected and not self.off_detected


def last_attack_defeated(metrics: MetricsReport, attack: str) -> bool:
    outcomes = [a.outcome for a in metrics.attacks if a.action.value == attack]
    return bool(outcomes) and outcomes[-1] == "defeated"


def run_row(entry: DefenseEntry) -> MatrixRow:
    assert entry.flag is not None and entry.off_value is not None and entry.scenario is not None
    scenario = load_bundled(entry.scenario)
    on = run_scenario(scenario)
    off = run_scenario(scenario.with_flags(**{entry.flag: entry.off_value}))
    row = MatrixRow(entry.name, entry.counters, entry.scenario,
                    last_attack_defeated(on, entry.counters),
                    last_attack_defeated(off, entry.counters))
    if not row.ok:
        logger.warning("defense %s: on=%s off=%s", entry.name, row.on_detected, row.off_detected)
    return row


def run_matrix() -> list[MatrixRow]:
    return [run_row(d) for d in DEFENSE_CATALOG
            if d.flag is not None and d.scenario is not None]


def _cell(detected: bool) -> str:
    return "detected" if detected else "missed"


def format_matrix(rows: list[MatrixRow]) -> str:
    header = ("attack", "defense", "on", "off", "")
    lines = [header] + [(r.attack, r.defense, _cell(r.on_detected), _cell(r.off_detected),
                         "ok" if r.ok else "FAIL") for r in rows]
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
                     for line in lines) + "\n"
