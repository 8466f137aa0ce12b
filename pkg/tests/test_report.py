import json
import subprocess
import sys
from pathlib import Path

import pytest

from asmkit import BASE, asm
from pebuild import PESpec, build_pe, iat_slots, many_imports
from tadaspot.cli import main
from tadaspot.loader import PackingVerdict, render_manifest
from tadaspot.rating import BackendError
from tadaspot.report import (
    AnalysisConfig, ImplementationKind, ManifestError, Report, Tactic, Tally, aggregate, analyze, emit_report,
    evaluate_corpus, is_detected, parse_ground_truth,
)
from tadaspot.report import Implementation

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"


def write_fixture(path: Path, source: str, **extra) -> Path:
    path.write_text(render_manifest({"base": hex(BASE), "code_hex": asm(source).hex(), **extra}))
    return path


@pytest.fixture
def cpuid_fixture(tmp_path):
    return write_fixture(tmp_path / "cpuid.fixture", "xor eax, eax\ntest ebx, ebx\njz skip\ncpuid\nskip:\nret")


# ---------------------------------------------------------------- analyze

def test_single_cpuid_block_is_the_only_positive(cpuid_fixture):
    report = analyze(cpuid_fixture)
    assert report.status == "ok" and report.exit_code == 0
    assert report.positives == [BASE + 6]
    assert report.total_blocks == 3 and len(report.records) == 1
    rec = report.records[0]
    assert rec.rating == 9 and rec.features == ("Uncommon INS: cpuid (Processor information)",)


def test_benign_straight_line_has_no_positives(tmp_path):
    report = analyze(write_fixture(tmp_path / "b.fixture", "mov eax, 1\nadd eax, ebx\nret"))
    assert report.positives == [] and report.records == ()


def test_packed_pe_halts_with_verdict(tmp_path):
    path = tmp_path / "packed.exe"
    path.write_bytes(build_pe(PESpec(code=asm("cpuid\nret"), imports=many_imports(2, 3))))
    report = analyze(path)
    assert report.status == "packed" and report.exit_code == 2
    assert report.packing.verdict is PackingVerdict.HEURISTIC_PACKED
    assert report.records == () and report.total_blocks == 0


def test_unpacked_pe_is_analyzed(tmp_path):
    imports = many_imports(5, 15)
    imports["lib0.dll"][0] = "IsDebuggerPresent"
    slot = iat_slots(imports)[("lib0.dll", "IsDebuggerPresent")]
    path = tmp_path / "ok.exe"
    path.write_bytes(build_pe(PESpec(code=asm(f"call dword ptr [{slot:#x}]\nret", 0x401000), imports=imports)))
    report = analyze(path)
    assert report.status == "ok"
    assert report.positives == [0x401000]
    assert report.records[0].features == ("Called API: IsDebuggerPresent()",)


def test_packing_check_policy_applies_to_fixtures(cpuid_fixture):
    assert analyze(cpuid_fixture, AnalysisConfig(packing_check="always")).status == "packed"
    with pytest.raises(ValueError):
        AnalysisConfig(packing_check="sometimes")


def test_load_errors_become_failure_reports(tmp_path):
    bad = tmp_path / "bad.exe"
    bad.write_bytes(b"not a pe at all")
    report = analyze(bad)
    assert report.status == "error" and report.exit_code == 3
    assert report.error["stage"] == "load" and report.error["type"] == "NotPE"
    assert analyze(tmp_path / "missing.exe").exit_code == 3


class BrokenBackend:
    backend_id = "broken"

    def complete(self, prompt_text):
        raise BackendError("no route")


def test_backend_errors_become_failure_reports(cpuid_fixture):
    from tadaspot.rating import RatingConfig
    config = AnalysisConfig(backend=BrokenBackend(), rating=RatingConfig(backoff_initial=0))
    report = analyze(cpuid_fixture, config)
    assert report.status == "error" and report.exit_code == 4 and report.error["stage"] == "rating"


def test_dump_prompts(tmp_path, cpuid_fixture):
    out = tmp_path / "prompts"
    analyze(cpuid_fixture, AnalysisConfig(dump_prompts=out))
    (dumped,) = out.iterdir()
    assert dumped.name == f"bb_{BASE + 6:08x}_fn_{BASE:08x}.txt"
    assert dumped.read_text().endswith("- Uncommon INS: cpuid (Processor information)\n")


# ---------------------------------------------------------------- emit

def test_json_report_shape(cpuid_fixture):
    doc = json.loads(emit_report(analyze(cpuid_fixture)))
    assert doc["schema"] == "tadaspot.report" and doc["schema_version"] == 1
    assert doc["positives"] == [hex(BASE + 6)]
    assert doc["records"][0]["prompt_sha256"]
    assert "prompt" not in doc["records"][0]


def test_empty_report_is_valid_json():
    doc = json.loads(emit_report(Report("x", "", "ok")))
    assert doc["positives"] == [] and doc["records"] == []


def test_positives_are_sorted_and_unique():
    from tadaspot.report import BlockRecord
    recs = tuple(BlockRecord(a, BASE, ("f",), 9, True, "", "b") for a in (0x401020, 0x401000, 0x401020))
    doc = json.loads(emit_report(Report("x", "", "ok", records=recs)))
    assert doc["positives"] == ["0x401000", "0x401020"]


def test_report_bytes_are_deterministic(cpuid_fixture):
    assert emit_report(analyze(cpuid_fixture)) == emit_report(analyze(cpuid_fixture))
    assert emit_report(analyze(cpuid_fixture), "text") == emit_report(analyze(cpuid_fixture), "text")


def test_unknown_format_rejected():
    with pytest.raises(ValueError):
        emit_report(Report("x", "", "ok"), "xml")


# ---------------------------------------------------------------- ground truth

def impl(ranges, tactic=Tactic.VM_EVASION, kind=ImplementationKind.ASSEMBLY, string=False, ident="i"):
    return Implementation(ident, tactic, kind, string, tuple(ranges))


def test_detection_rule_uses_block_starts():
    i = impl([(0x401000, 0x401010), (0x401040, 0x401050)])
    assert is_detected(i, [0x401044])
    assert not is_detected(i, [0x401010, 0x400fff])
    assert not is_detected(i, [])


def test_parse_ground_truth(tmp_path):
    samples = parse_ground_truth(
        "sample a.fixture\nimpl a/0 VMEvasion Assembly string 0x401000-0x401010,0x401020-0x401030\n"
        "sample b.fixture  # benign\n", tmp_path)
    assert [s.path.name for s in samples] == ["a.fixture", "b.fixture"]
    (a0,) = samples[0].implementations
    assert a0.involves_string and a0.ranges == ((0x401000, 0x401010), (0x401020, 0x401030))
    assert samples[1].implementations == ()


@pytest.mark.parametrize("text", [
    "impl x VMEvasion Assembly string 0x1-0x2\n",
    "sample a\nimpl x Magic Assembly string 0x1-0x2\n",
    "sample a\nimpl x VMEvasion Inline string 0x1-0x2\n",
    "sample a\nimpl x VMEvasion Assembly maybe 0x1-0x2\n",
    "sample a\nimpl x VMEvasion Assembly string 0x2-0x1\n",
    "sample a\nimpl x VMEvasion Assembly string 0x1-0x4,0x3-0x5\n",
    "sample a\nimpl x VMEvasion Assembly string 0x1-0x2\nimpl x VMEvasion Assembly string 0x3-0x4\n",
    "sample a\nimpl x VMEvasion Assembly string 12\n",
    "bogus line\n",
])
def test_bad_ground_truth(text):
    with pytest.raises(ManifestError):
        parse_ground_truth(text)


def test_tally_rate_rounding():
    t = Tally()
    for i in range(164):
        t = t.add(i < 144)
    assert (t.detected, t.total, t.rate) == (144, 164, 87.80)
    assert Tally().rate == 0.0
    with pytest.raises(ValueError):
        Tally(3, 2)


def test_aggregate_partitions_are_exhaustive():
    outcomes = [
        (impl([(0, 1)], Tactic.DEBUGGER_EVASION, ImplementationKind.DIRECT_API, True, "a"), True),
        (impl([(0, 1)], Tactic.VM_EVASION, ImplementationKind.ASSEMBLY, False, "b"), False),
        (impl([(0, 1)], Tactic.VM_EVASION, ImplementationKind.INDIRECT_API, True, "c"), True),
    ]
    stats = aggregate(outcomes)
    assert stats.overall == Tally(2, 3)
    for part in (stats.by_tactic, stats.by_kind, stats.by_string):
        assert sum(t.total for t in part.values()) == 3
        assert sum(t.detected for t in part.values()) == 2
    assert stats.by_tactic["VMEvasion"] == Tally(1, 2)
    assert stats.by_string["no_string"] == Tally(0, 1)


def test_evaluate_committed_corpus():
    result = evaluate_corpus(CORPUS / "ground_truth.txt")
    assert all(hit for _, hit in result.outcomes), [i for i, hit in result.outcomes if not hit]
    assert set(result.benign_positives.values()) == {0}
    assert result.stats.overall.rate == 100.0
    assert all(t.total > 0 for t in result.stats.by_tactic.values())
    assert all(t.total > 0 for t in result.stats.by_kind.values())


def test_evaluate_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        evaluate_corpus(tmp_path / "nope.txt")


# ---------------------------------------------------------------- CLI

def test_cli_analyze_json_and_exit_code(cpuid_fixture, capsysbinary):
    assert main(["analyze", str(cpuid_fixture)]) == 0
    doc = json.loads(capsysbinary.readouterr().out)
    assert doc["positives"] == [hex(BASE + 6)]


def test_cli_fixture_flag_and_out_file(tmp_path, cpuid_fixture):
    renamed = tmp_path / "cpuid.txt"
    renamed.write_text(cpuid_fixture.read_text())
    out = tmp_path / "report.txt"
    assert main(["analyze", str(renamed), "--fixture", "--format", "text", "--out", str(out)]) == 0
    assert "BP Uncommon INS: cpuid" in out.read_text()
    assert main(["analyze", str(renamed)]) == 3


def test_cli_exit_codes(tmp_path, monkeypatch, capsysbinary):
    packed = tmp_path / "packed.exe"
    packed.write_bytes(build_pe(PESpec(imports=many_imports(1, 1))))
    assert main(["analyze", str(packed)]) == 2
    monkeypatch.delenv("TADASPOT_BASE_URL", raising=False)
    assert main(["analyze", str(packed), "--backend", "remote"]) == 4


def test_cli_threshold(cpuid_fixture, capsysbinary):
    assert main(["analyze", str(cpuid_fixture), "--threshold", "10"]) == 0
    assert json.loads(capsysbinary.readouterr().out)["positives"] == []


def test_cli_evaluate(capsysbinary):
    assert main(["evaluate", str(CORPUS / "ground_truth.txt")]) == 0
    doc = json.loads(capsysbinary.readouterr().out)
    assert doc["stats"]["overall"]["rate"] == 100.0


def test_cli_subprocess_is_byte_stable(cpuid_fixture):
    cmd = [sys.executable, "-m", "tadaspot", "analyze", str(cpuid_fixture), "--backend", "local"]
    first = subprocess.run(cmd, capture_output=True, check=True).stdout
    second = subprocess.run(cmd, capture_output=True, check=True).stdout
    assert first == second and first
