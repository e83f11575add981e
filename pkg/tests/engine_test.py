import pytest

from avbastion.attacks import (attack_facade_mbr, attack_flip_state,
                               attack_install_rootkit, attack_plant_bomb,
                               attack_tamper_signature_db, infect_file,
                               make_sample)
from avbastion.budget import BudgetPolicy, Meter
from avbastion.engine import (COMPONENT_NAMES, AlgorithmCatalog, Clean,
                              EngineInstance, Infected, MbrStatus,
                              ScanOptions, SignatureDb, Suspicious,
                              SuspicionReason, check_mbr, detect_rootkit,
                              engine_install, full_scan, incremental_scan,
                              match_signatures, reference_install, repair_mbr,
                              scan_file, second_opinion_scan, verdict_to_dict)
from avbastion.errors import EngineCompromised, InvalidK
from avbastion.fstore import FileKind, FileStore, RleContainer, View
from avbastion.integrity import ScanStatus, get_state
from avbastion.rng import Rng
from avbastion.trusted import provision
from avbastion.vdisk import disk_new

CATALOG = AlgorithmCatalog(8, 4)
MBR = b"\xfa\x33\xc0" + bytes(507) + b"\x55\xaa"


def world(seed: int = 1, policy: BudgetPolicy = BudgetPolicy()) -> tuple[FileStore, EngineInstance, dict[str, int]]:
    rng = Rng(seed)
    disk = disk_new(2048, 512)
    disk.write_sectors(0, MBR)
    fs = FileStore(disk)
    ids = {
        "report.doc": fs.create_file("report.doc", FileKind.DATA, rng.bytes(3000)),
        "tool.exe": fs.create_file("tool.exe", FileKind.EXECUTABLE, rng.bytes(1500)),
        "notes.txt": fs.create_file("notes.txt", FileKind.DATA, rng.bytes(700)),
    }
    engine = engine_install(CATALOG, rng.next_u64(), 3, provision(rng), fs, policy,
                            component_sizes=(1000, 2000))
    return fs, engine, ids


def test_catalog_patterns() -> None:
    assert len(CATALOG.pattern(0, 0)) == 8
    assert CATALOG.pattern(1, 2) == AlgorithmCatalog(8, 4).pattern(1, 2)
    patterns = {CATALOG.pattern(f, a) for f in range(4) for a in range(8)}
    assert len(patterns) == 32
    with pytest.raises(ValueError):
        AlgorithmCatalog(0, 4)


def test_install_lays_out_the_av_files() -> None:
    fs, engine, _ = world()
    assert len(engine.installed) == 3
    assert set(engine.sig_db.patterns) == {(f, a) for f in range(4) for a in engine.installed}
    roles = [e.role for e in engine.store.manifest]
    assert roles == list(COMPONENT_NAMES)
    for e in engine.store.manifest:
        f = fs.entry(e.file_id)
        assert f.kind == FileKind.AV_COMPONENT
        assert f.name == COMPONENT_NAMES[e.role]
        assert f.length % 4096 != 0
    assert engine.store.golden_mbr == MBR
    assert engine.files is not None
    assert fs.entry(engine.files.state).kind == FileKind.DATA


def test_install_rejects_bad_k() -> None:
    disk = disk_new(256, 512)
    fs = FileStore(disk)
    with pytest.raises(InvalidK):
        engine_install(CATALOG, 1, 9, provision(Rng(1)), fs)
    with pytest.raises(InvalidK):
        reference_install(CATALOG, 1, 0, provision(Rng(1)))


def test_match_signatures() -> None:
    db = SignatureDb({(1, 0): b"AAAAAAAA", (0, 3): b"BBBBBBBB"})
    assert match_signatures(db, b"..BBBBBBBB..AAAAAAAA") == Infected(0, 3)
    assert match_signatures(db, b"AAAAAAA") == Clean()


def test_clean_world_scans_clean() -> None:
    fs, engine, _ = world()
    report = full_scan(engine, fs, fs.disk, tick=1)
    assert report.engine_status == "ok"
    assert report.self_check
    assert report.mbr_status == MbrStatus.CONSISTENT
    assert report.rootkits == []
    assert report.files_scanned == len(fs.files())
    assert all(isinstance(v, Clean) for v in report.verdicts.values())
    assert report.to_dict()["verdicts"][0] == {"file": 1, "verdict": "clean"}


def test_infection_is_detected_unless_every_installed_algorithm_is_evaded() -> None:
    fs, engine, ids = world()
    infect_file(fs, ids["report.doc"], make_sample(CATALOG, 2, frozenset(), Rng(5)))
    infect_file(fs, ids["tool.exe"], make_sample(CATALOG, 1, engine.installed, Rng(6)))
    report = full_scan(engine, fs, fs.disk)
    verdict = report.verdicts[ids["report.doc"]]
    assert isinstance(verdict, Infected) and verdict.family == 2
    assert verdict.algorithm in engine.installed
    assert report.verdicts[ids["tool.exe"]] == Clean()


def test_incremental_scan_only_reads_dirty_files() -> None:
    fs, engine, ids = world()
    first = incremental_scan(engine, fs, fs.disk, tick=1)
    assert first.files_scanned == len(fs.files())
    second = incremental_scan(engine, fs, fs.disk, tick=2)
    assert second.files_scanned == 0
    assert second.verdicts == first.verdicts
    fs.overwrite_file(ids["notes.txt"], b"changed" * 10)
    third = incremental_scan(engine, fs, fs.disk, tick=3)
    assert third.files_scanned == 1
    assert third.changed_files == [ids["notes.txt"]]
    assert third.bytes_consumed == 70


def test_scan_records_state() -> None:
    fs, engine, ids = world()
    infect_file(fs, ids["tool.exe"], make_sample(CATALOG, 0, frozenset(), Rng(1)))
    full_scan(engine, fs, fs.disk, tick=4)
    assert get_state(engine.state_db, ids["report.doc"]).status == ScanStatus.ALREADY_SCANNED
    assert get_state(engine.state_db, ids["tool.exe"]).status == ScanStatus.INFECTED
    assert get_state(engine.state_db, ids["tool.exe"]).tick == 4


def test_emptied_file_is_rescanned_incrementally() -> None:
    fs, engine, ids = world()
    target = ids["tool.exe"]
    infect_file(fs, target, make_sample(CATALOG, 1, frozenset(), Rng(2)))
    assert isinstance(incremental_scan(engine, fs, fs.disk, tick=1).verdicts[target], Infected)
    fs.overwrite_file(target, b"")
    assert fs.entry(target).sectors == []
    report = incremental_scan(engine, fs, fs.disk, tick=2)
    assert report.verdicts[target] == Clean()
    assert report.verdicts == full_scan(engine, fs, fs.disk, tick=3).verdicts


def test_removed_hook_clears_a_cached_suspicion() -> None:
    fs, engine, ids = world()
    target = ids["notes.txt"]
    incremental_scan(engine, fs, fs.disk, tick=1)
    fs.install_interceptor(target, b"nothing to see")
    report = incremental_scan(engine, fs, fs.disk, tick=2)
    assert report.verdicts[target] == Suspicious(SuspicionReason.CROSS_VIEW_MISMATCH)
    fs.remove_interceptor(target)
    report = incremental_scan(engine, fs, fs.disk, tick=3)
    assert report.verdicts[target] == Clean()
    assert report.files_scanned < len(fs.files())


def test_forged_state_does_not_hide_an_infection() -> None:
    fs, engine, ids = world()
    incremental_scan(engine, fs, fs.disk, tick=1)
    target = ids["report.doc"]
    infect_file(fs, target, make_sample(CATALOG, 1, frozenset(), Rng(2)))
    assert engine.files is not None
    attack_flip_state(fs, engine.files.state, target, 2)
    report = incremental_scan(engine, fs, fs.disk, tick=3)
    assert report.tampered_databases == ["state"]
    assert isinstance(report.verdicts[target], Infected)
    assert full_scan(engine, fs, fs.disk, tick=4).verdicts[target] == report.verdicts[target]


def test_state_trusting_baseline_skips_the_flipped_file() -> None:
    fs, engine, ids = world()
    trusting = ScanOptions(trust_state_db=True)
    incremental_scan(engine, fs, fs.disk, tick=1, options=trusting)
    target = ids["report.doc"]
    infect_file(fs, target, make_sample(CATALOG, 1, frozenset(), Rng(2)))
    assert engine.files is not None
    attack_flip_state(fs, engine.files.state, target, 2)
    report = incremental_scan(engine, fs, fs.disk, tick=3, options=trusting)
    assert report.verdicts[target] == Clean()
    assert report.tampered_databases == []


def test_tampered_signatures_compromise_the_engine() -> None:
    fs, engine, _ = world()
    assert engine.files is not None
    attack_tamper_signature_db(fs, engine.files.signatures, Rng(3))
    report = full_scan(engine, fs, fs.disk)
    assert report.compromised
    assert report.verdicts == {}
    unchecked = full_scan(engine, fs, fs.disk, options=ScanOptions(verify_seals=False))
    assert not unchecked.compromised


def test_scan_file_refuses_broken_in_memory_seals() -> None:
    fs, engine, ids = world()
    engine.sig_db.patterns[(0, 0)] = b"XXXXXXXX"
    with pytest.raises(EngineCompromised):
        scan_file(engine, fs, ids["notes.txt"], View.RAW, Meter.unlimited())


def test_bomb_is_suspicious_only_with_a_budget() -> None:
    fs, engine, _ = world()
    bomb = attack_plant_bomb(fs, 160)
    report = full_scan(engine, fs, fs.disk)
    assert report.verdicts[bomb] == Suspicious(SuspicionReason.BREAK)
    unlimited = full_scan(engine, fs, fs.disk, options=ScanOptions(budget=False))
    assert unlimited.verdicts[bomb] == Clean()
    assert unlimited.bytes_consumed > report.bytes_consumed


def test_malformed_archive_is_suspicious() -> None:
    fs, engine, _ = world()
    good = fs.create_file("ok.rle", FileKind.COMPRESSED_ARCHIVE,
                          RleContainer(((10, 1),)).to_bytes())
    bad = fs.create_file("bad.rle", FileKind.COMPRESSED_ARCHIVE, b"RLE1\x05\x00\x00\x00")
    report = full_scan(engine, fs, fs.disk)
    assert report.verdicts[good] == Clean()
    assert report.verdicts[bad] == Suspicious(SuspicionReason.FORMAT_ERROR)
    assert verdict_to_dict(report.verdicts[bad]) == {"verdict": "suspicious", "reason": "format_error"}


def test_infected_archive_content_is_found_after_decompression() -> None:
    fs, engine, _ = world()
    a = min(engine.installed)
    pattern = CATALOG.pattern(3, a)
    runs = [(1, b) for b in pattern]
    id = fs.create_file("packed.rle", FileKind.COMPRESSED_ARCHIVE, RleContainer(tuple(runs)).to_bytes())
    assert full_scan(engine, fs, fs.disk).verdicts[id] == Infected(3, a)


def test_facade_mbr_is_detected_and_repaired() -> None:
    fs, engine, _ = world()
    disk, store = fs.disk, engine.store
    assert check_mbr(disk, store) == MbrStatus.CONSISTENT
    facade = attack_facade_mbr(disk, b"\xeb\xfeBOOTKIT")
    assert disk.read_mbr_standard() == MBR
    assert check_mbr(disk, store) == MbrStatus.FACADE_DETECTED
    assert check_mbr(disk, store, trusted_bios=False) == MbrStatus.CONSISTENT
    repair_mbr(disk, store, store.token)
    assert check_mbr(disk, store) == MbrStatus.CONSISTENT
    assert disk.read_sectors_raw(0, 1) == disk.read_mbr_standard() == MBR
    assert not disk.is_allocated(facade)


def test_repair_releases_stacked_facades() -> None:
    fs, engine, _ = world()
    disk, store = fs.disk, engine.store
    free = disk.free_count()
    first = attack_facade_mbr(disk, b"\xeb\xfeBOOTKIT")
    second = attack_facade_mbr(disk, b"\xeb\xfeAGAIN")
    assert disk.free_count() == free - 2
    repair_mbr(disk, store, store.token, fs)
    assert check_mbr(disk, store) == MbrStatus.CONSISTENT
    assert not disk.is_allocated(first) and not disk.is_allocated(second)
    assert disk.free_count() == free
    assert all(disk.is_allocated(s) for f in fs.files() for s in f.sectors)


def test_modified_mbr_without_facade() -> None:
    fs, engine, _ = world()
    fs.disk.write_sectors(0, b"\x90" * 512)
    assert check_mbr(fs.disk, engine.store) == MbrStatus.MODIFIED_DETECTED
    assert check_mbr(fs.disk, engine.store, trusted_bios=False) == MbrStatus.MODIFIED_DETECTED


def test_rootkit_is_swept_before_scanning() -> None:
    fs, engine, ids = world()
    target = ids["report.doc"]
    sample = make_sample(CATALOG, 0, frozenset(), Rng(9))
    infect_file(fs, target, sample)
    attack_install_rootkit(fs, target, sample)
    assert detect_rootkit(engine, fs, target)
    report = full_scan(engine, fs, fs.disk)
    assert report.rootkits == [target]
    assert report.raw_view
    assert isinstance(report.verdicts[target], Infected)
    blind = full_scan(engine, fs, fs.disk, options=ScanOptions(rootkit_sweep=False))
    assert blind.verdicts[target] == Clean()
    assert not blind.raw_view


def test_hooked_clean_file_is_a_cross_view_mismatch() -> None:
    fs, engine, ids = world()
    fs.install_interceptor(ids["notes.txt"], b"something else")
    report = full_scan(engine, fs, fs.disk)
    assert report.verdicts[ids["notes.txt"]] == Suspicious(SuspicionReason.CROSS_VIEW_MISMATCH)


def test_replaced_component_and_the_false_assurance() -> None:
    fs, engine, ids = world()
    infect_file(fs, ids["notes.txt"], make_sample(CATALOG, 0, frozenset(), Rng(4)))
    scanner = engine.store.component("scanner")
    fs.overwrite_file(scanner.file_id, b"MZ attacker")
    checked = full_scan(engine, fs, fs.disk)
    assert checked.compromised
    assert not checked.self_check
    fooled = full_scan(engine, fs, fs.disk, options=ScanOptions(skip_self_check=True))
    assert not fooled.compromised
    assert all(isinstance(v, Clean) for v in fooled.verdicts.values())

    reference = reference_install(CATALOG, 12345, 3, provision(Rng(77)))
    opinion = second_opinion_scan(reference, fs, engine.store.manifest, tick=5)
    assert opinion.modified_components == [("scanner", scanner.file_id)]
    assert opinion.to_dict()["mode"] == "second_opinion"


def test_second_opinion_sees_through_rootkits() -> None:
    fs, engine, ids = world()
    target = ids["tool.exe"]
    sample = make_sample(CATALOG, 1, frozenset(), Rng(4))
    infect_file(fs, target, sample)
    attack_install_rootkit(fs, target, sample)
    reference = reference_install(CATALOG, 999, 8, provision(Rng(78)))
    opinion = second_opinion_scan(reference, fs, engine.store.manifest)
    assert opinion.rootkits == [target]
    assert isinstance(opinion.verdicts[target], Infected)
    assert opinion.modified_components == []
