from avbastion.matrix import (MatrixRow, format_matrix, last_attack_defeated,
                              run_matrix, run_row)
from avbastion.runner import AttackRecord, MetricsReport
from avbastion.scenario import Action
from avbastion.selfprotect import DEFENSE_CATALOG, defense


def test_last_attack_decides_the_cell() -> None:
    metrics = MetricsReport("x", 0, attacks=[
        AttackRecord(1, Action.INFECT, outcome="succeeded"),
        AttackRecord(2, Action.INFECT, outcome="defeated"),
        AttackRecord(3, Action.PLANT_BOMB, outcome="succeeded"),
    ])
    assert last_attack_defeated(metrics, "attack.infect")
    assert not last_attack_defeated(metrics, "attack.plant_bomb")
    assert not last_attack_defeated(metrics, "attack.facade_mbr")


def test_budget_row() -> None:
    row = run_row(defense("budget"))
    assert row == MatrixRow("budget", "attack.plant_bomb", "bomb", True, False)
    assert row.ok


def test_every_defense_defeats_its_attack_and_only_when_on() -> None:
    rows = run_matrix()
    assert len(rows) == sum(d.flag is not None for d in DEFENSE_CATALOG)
    failing = [r.defense for r in rows if not r.ok]
    assert failing == []


def test_format_matrix() -> None:
    text = format_matrix([MatrixRow("budget", "attack.plant_bomb", "bomb", True, False),
                          MatrixRow("rootkit_sweep", "attack.install_rootkit", "rootkit", True, True)])
    lines = text.splitlines()
    assert lines[0].split() == ["attack", "defense", "on", "off"]
    assert lines[1].split() == ["attack.plant_bomb", "budget", "detected", "missed", "ok"]
    assert lines[2].split()[-1] == "FAIL"
