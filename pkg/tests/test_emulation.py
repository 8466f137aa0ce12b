from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asmkit import BASE, fixture
from emuoracle import run_unicorn
from tadaspot.disasm import function_cfg
from tadaspot.emulator import STACK_TOP, Emulator, run_function
from tadaspot.features.strings import (
    EmulationReason, EmulationTriggerConfig, Origin, emulate_for_strings, should_emulate, string_features,
)
from tadaspot.loader import load_path

CORPUS = Path(__file__).resolve().parent.parent / "corpus" / "fixtures"

# plaintexts the decoders must produce, written out by hand
DEOBFUSCATION_ORACLE = {
    "tool_xor_decoded_name": ["wireshark.exe"],
    "vm_add_rotate_decoded": ["VBoxService.exe"],
    "sbx_stack_string_module": ["SbieDll.dll"],
    "sbx_encoded_stack_string": ["cuckoomon.dll"],
}


def corpus_cfg(name):
    img = load_path(CORPUS / f"{name}.fixture")
    return img, function_cfg(img, img.entry_point)


def emulate(img, max_steps=10_000):
    cfg = function_cfg(img, img.entry_point)
    emu = Emulator(img)
    return emu, run_function(emu, cfg, max_steps)


def assert_matches_unicorn(img):
    emu, outcome = emulate(img)
    oracle = run_unicorn(img)
    assert outcome.steps == oracle.steps
    assert emu.regs == oracle.regs
    for addr, value in emu.memory.items():
        assert oracle.read(addr, 1)[0] == value, f"byte at {addr:#x}"


@pytest.mark.parametrize("name", sorted(DEOBFUSCATION_ORACLE))
def test_deobfuscation_recovers_oracle_strings(name):
    img, cfg = corpus_cfg(name)
    assert should_emulate(cfg, img)[0]
    result = emulate_for_strings(cfg, img)
    assert result.values == DEOBFUSCATION_ORACLE[name]
    assert not result.budget_exceeded
    assert all(s.origin is Origin.EMULATED for s in result)


@pytest.mark.parametrize("name", sorted(DEOBFUSCATION_ORACLE))
def test_deobfuscation_fixture_matches_unicorn(name):
    img, _ = corpus_cfg(name)
    assert_matches_unicorn(img)
    oracle = run_unicorn(img)
    stack = oracle.read(STACK_TOP - 0x100, 0x100)
    assert DEOBFUSCATION_ORACLE[name][0].encode() in stack


def test_emulated_string_attributed_to_writing_block():
    img, cfg = corpus_cfg("tool_xor_decoded_name")
    (found,) = emulate_for_strings(cfg, img)
    block = cfg.blocks[found.attributed_block[1]]
    assert block.start in block.successors
    feats = string_features(cfg, img)
    assert [f.text for f in feats[block.start]] == ['String Reference: "wireshark.exe"']


def test_trigger_reasons():
    loop = fixture("xor ecx, ecx\nl: inc ecx\ncmp ecx, 3\njb l\nret")
    assert should_emulate(function_cfg(loop, BASE), loop) == (True, EmulationReason.SINGLE_BLOCK_LOOP)
    movs = fixture("\n".join(f"mov byte ptr [ebp-{16 - i}], {0x41 + i}" for i in range(6)) + "\nret")
    assert should_emulate(function_cfg(movs, BASE), movs) == (True, EmulationReason.CONSECUTIVE_MOVS)
    five = fixture("\n".join(f"mov byte ptr [ebp-{16 - i}], {0x41 + i}" for i in range(5)) + "\nret")
    assert should_emulate(function_cfg(five, BASE), five) == (False, EmulationReason.NO)
    broken = fixture("\n".join(
        f"mov byte ptr [ebp-{16 - i}], {0x41 + i}" + ("\nnop" if i == 2 else "") for i in range(6)) + "\nret")
    assert not should_emulate(function_cfg(broken, BASE), broken)[0]


def test_trigger_threshold_is_configurable():
    five = fixture("\n".join(f"mov byte ptr [ebp-{16 - i}], {0x41 + i}" for i in range(5)) + "\nret")
    cfg = function_cfg(five, BASE)
    assert should_emulate(cfg, five, EmulationTriggerConfig(min_consecutive_movs=5))[0]


def test_step_budget_keeps_partial_output():
    img = fixture("""
        mov byte ptr [ebp-8], 0x41
        mov byte ptr [ebp-7], 0x42
        mov byte ptr [ebp-6], 0x43
        mov byte ptr [ebp-5], 0x44
        mov byte ptr [ebp-4], 0x45
        mov byte ptr [ebp-3], 0x46
    spin:
        inc ecx
        jmp spin
    """)
    cfg = function_cfg(img, BASE)
    result = emulate_for_strings(cfg, img, EmulationTriggerConfig(max_steps=50))
    assert result.budget_exceeded and result.steps == 50
    assert result.values == ["ABCDEF"]


def test_data_sections_are_copy_on_write():
    img = fixture("mov eax, 0x402000\nxor byte ptr [eax], 0x20\nret", data=b"abcd\0")
    emu, _ = emulate(img)
    assert emu.read_byte(0x402000) == ord("A")
    assert img.byte_at(0x402000) == ord("a")


def test_fs_reads_are_zero():
    img = fixture("mov eax, 7\nmov eax, dword ptr fs:[0x30]\nret")
    emu, _ = emulate(img)
    assert emu.regs["eax"] == 0


# ---------------------------------------------------------------- conformance

REGS8 = ["al", "bl", "cl", "dl"]
REGS32 = ["eax", "ebx", "ecx", "edx", "esi", "edi"]


@st.composite
def straight_programs(draw):
    lines = [f"mov {r}, {draw(st.integers(0, 0xFFFFFFFF)):#x}" for r in REGS32]
    for _ in range(draw(st.integers(1, 40))):
        kind = draw(st.sampled_from(["alu", "alu8", "unary", "shift", "stack", "mem", "lea", "branch"]))
        a, b = draw(st.sampled_from(REGS32)), draw(st.sampled_from(REGS32))
        if kind == "alu":
            op = draw(st.sampled_from(["add", "sub", "xor", "or", "and", "mov"]))
            src = b if draw(st.booleans()) else f"{draw(st.integers(0, 0xFFFFFFFF)):#x}"
            lines.append(f"{op} {a}, {src}")
        elif kind == "alu8":
            op = draw(st.sampled_from(["add", "sub", "xor", "mov"]))
            lines.append(f"{op} {draw(st.sampled_from(REGS8))}, {draw(st.integers(0, 255)):#x}")
        elif kind == "unary":
            lines.append(f"{draw(st.sampled_from(['inc', 'dec', 'not', 'neg']))} {a}")
        elif kind == "shift":
            op = draw(st.sampled_from(["shl", "shr", "sar", "rol", "ror"]))
            lines.append(f"{op} {a}, {draw(st.integers(1, 31))}")
        elif kind == "stack":
            lines += [f"push {a}", f"pop {b}"]
        elif kind == "mem":
            off = draw(st.integers(1, 32)) * 4
            lines += [f"mov dword ptr [ebp-{off:#x}], {a}", f"movzx {b}, byte ptr [ebp-{off - 1:#x}]"]
        elif kind == "lea":
            lines.append(f"lea {a}, [{b}+{a}*4+{draw(st.integers(0, 255)):#x}]")
        else:
            cc = draw(st.sampled_from(["je", "jne", "jb", "jae", "ja", "jbe", "jl", "jge", "jg", "jle", "js"]))
            n = len(lines)
            lines += [f"cmp {a}, {b}", f"{cc} skip{n}", f"inc {a}", f"skip{n}:"]
    return "\n".join(lines + ["ret"])


@settings(max_examples=150, deadline=None)
@given(straight_programs())
def test_interpreter_matches_unicorn(source):
    assert_matches_unicorn(fixture(source))
