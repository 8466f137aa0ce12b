import struct

import pytest

from pebuild import (
    SCN_CODE, SCN_EXEC, SCN_READ, SCN_WRITE, PESpec, RawSection, build_pe, iat_slots, idata_va, many_imports, text_va,
)
from tadaspot.loader import (
    BinaryImage, CorruptHeader, FormatKind, ImportEntry, ImportTable, MalformedManifest, NotPE,
    PackerHeuristicConfig, PackingVerdict, Section, UnsupportedArch, detect_packing, load_fixture, load_path,
    parse_manifest, parse_pe, render_manifest,
)


# ---------------------------------------------------------------- parse_pe

def test_pe_round_trip_sections_and_entry():
    code = b"\x55\x89\xe5\x5d\xc3"
    img = parse_pe(build_pe(PESpec(code=code, imports={"kernel32.dll": ["Sleep"]}, entry_offset=1)))
    assert img.format_kind is FormatKind.PE32
    assert img.image_base == 0x400000
    assert img.entry_point == text_va() + 1
    text = img.section_at(text_va())
    assert text.name == ".text"
    assert text.executable and "readable" in text.flags
    assert img.read(text_va(), len(code)) == code
    assert [s.name for s in img.executable_sections()] == [".text"]


def test_pe_imports_name_and_ordinal_slots():
    imports = {"KERNEL32.dll": ["IsDebuggerPresent", "Sleep"], "user32.dll": ["MessageBoxA", 17]}
    img = parse_pe(build_pe(PESpec(imports=imports)))
    slots = iat_slots(imports)
    assert img.imports.at_slot(slots[("KERNEL32.dll", "Sleep")]).symbol == "Sleep"
    ordinal = img.imports.at_slot(slots[("user32.dll", 17)])
    assert ordinal.symbol is None and ordinal.ordinal == 17
    assert img.imports.library_count == 2
    assert img.imports.function_count == 4


def test_pe_data_readable_through_image():
    img = parse_pe(build_pe(PESpec(imports={"a.dll": ["F"]}, data=b"VMware\0")))
    sec = img.section_at(idata_va())
    assert not sec.executable
    assert b"VMware\0" in sec.data


def test_not_pe_on_garbage():
    with pytest.raises(NotPE):
        parse_pe(b"\x7fELF" + bytes(200))
    with pytest.raises(NotPE):
        parse_pe(b"")


def test_not_pe_without_pe_signature():
    data = bytearray(build_pe(PESpec()))
    data[0x40:0x44] = b"NE\0\0"
    with pytest.raises(NotPE):
        parse_pe(bytes(data))


def test_corrupt_header_lfanew_past_eof():
    data = bytearray(build_pe(PESpec()))
    struct.pack_into("<I", data, 0x3C, len(data) + 16)
    with pytest.raises(CorruptHeader):
        parse_pe(bytes(data))


def test_corrupt_header_section_past_eof():
    data = build_pe(PESpec(code=b"\xc3" * 0x300))
    with pytest.raises(CorruptHeader):
        parse_pe(data[:0x500])


@pytest.mark.parametrize("machine,magic", [(0x8664, 0x20B), (0x14C, 0x20B), (0x1C0, 0x10B)])
def test_unsupported_arch(machine, magic):
    with pytest.raises(UnsupportedArch):
        parse_pe(build_pe(PESpec(machine=machine, magic=magic)))


def test_overlapping_sections_rejected():
    a = Section(".a", 0x1000, 0x100, frozenset({"executable"}), bytes(0x100))
    b = Section(".b", 0x1080, 0x100, frozenset({"readable"}), bytes(0x100))
    with pytest.raises(CorruptHeader):
        BinaryImage(FormatKind.RAW_FIXTURE, (a, b), ImportTable(()), 0x1000, 0x1000)


def test_read_does_not_cross_sections():
    img = load_fixture({"base": 0x401000, "code_hex": b"\x90" * 16, "data": [{"address": 0x401010, "hex": b"AB"}]})
    assert img.read(0x40100E, 2) == b"\x90\x90"
    assert img.read(0x40100F, 2) is None
    assert img.byte_at(0x401011) == ord("B")
    assert not img.is_mapped(0x401012)


# ---------------------------------------------------------------- fixtures

MANIFEST = """\
# toy
base = 0x401000
code_hex = 31c0 c3
data = 0x402000 564d7761726500
import = kernel32.dll IsDebuggerPresent 0x403000
"""


def test_fixture_manifest_round_trip(tmp_path):
    img = load_fixture(MANIFEST)
    assert img.format_kind is FormatKind.RAW_FIXTURE
    assert img.entry_point == 0x401000
    assert img.read(0x401000, 3) == b"\x31\xc0\xc3"
    assert img.imports.at_slot(0x403000).name == "IsDebuggerPresent"
    again = load_fixture(render_manifest(parse_manifest(MANIFEST)))
    assert again.sections == img.sections and again.imports == img.imports
    path = tmp_path / "toy.fixture"
    path.write_text(MANIFEST)
    assert load_path(path).sections == img.sections


@pytest.mark.parametrize("text", [
    "base = 0x401000\n",
    "code_hex = c3\n",
    "base = 0x401000\ncode_hex = zz\n",
    "base = 0x401000\ncode_hex = c3\nbogus = 1\n",
    "base = 0x401000\ncode_hex = c3\nimport = k.dll A 0x403000\nimport = k.dll B 0x403000\n",
    "base = 0x401000\ncode_hex = c3\nimport = k.dll A\n",
    "no equals sign\n",
])
def test_malformed_manifests(text):
    with pytest.raises(MalformedManifest):
        load_fixture(text)


# ---------------------------------------------------------------- packing

def _pe_with(n_libs, n_funcs, extra=()):
    return parse_pe(build_pe(PESpec(imports=many_imports(n_libs, n_funcs), extra_sections=list(extra))))


def test_packing_boundaries():
    assert detect_packing(_pe_with(4, 30)).verdict is PackingVerdict.HEURISTIC_PACKED
    assert detect_packing(_pe_with(6, 14)).verdict is PackingVerdict.HEURISTIC_PACKED
    ok = detect_packing(_pe_with(5, 15))
    assert ok.verdict is PackingVerdict.NOT_PACKED and not ok.packed
    assert (ok.library_count, ok.function_count) == (5, 15)


def test_known_packer_section_wins():
    upx = RawSection("UPX0", b"", SCN_CODE | SCN_EXEC | SCN_READ | SCN_WRITE, virtual_size=0x1000)
    verdict = detect_packing(_pe_with(8, 40, [upx]))
    assert verdict.verdict is PackingVerdict.KNOWN_PACKER
    assert verdict.packer_name == "UPX"


def test_library_count_is_case_insensitive():
    entries = tuple(ImportEntry(lib, f"F{i}", 0x403000 + 4 * i, None)
                    for i, lib in enumerate(["KERNEL32.dll", "kernel32.DLL", "a.dll", "b.dll", "c.dll"]))
    assert ImportTable(entries).library_count == 4


def test_packer_config_is_tunable():
    img = _pe_with(4, 30)
    relaxed = PackerHeuristicConfig(min_libraries=3, min_functions=15)
    assert detect_packing(img, relaxed).verdict is PackingVerdict.NOT_PACKED
