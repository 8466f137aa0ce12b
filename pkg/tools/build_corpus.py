"""Regenerate the committed fixture corpus under ``corpus/``.

Each fixture is written from assembly source with keystone.  Code starts
at 0x401000, strings and encoded blobs at 0x402000 and IAT slots at
0x403000.  Ground-truth ranges come from ``tN_begin``/``tN_end`` labels
in the source, so editing a fixture never requires hand-computing
addresses.

    python3 tools/build_corpus.py [OUT_DIR]

Requires the ``dev`` extra (keystone-engine).
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import keystone

from tadaspot.loader import render_manifest

CODE_BASE = 0x401000
DATA_BASE = 0x402000
IAT_BASE = 0x403000

LIBRARY = {
    "CheckRemoteDebuggerPresent": "kernel32.dll",
    "CloseHandle": "kernel32.dll",
    "CreateFileA": "kernel32.dll",
    "CreateToolhelp32Snapshot": "kernel32.dll",
    "FindWindowA": "user32.dll",
    "GetCurrentProcess": "kernel32.dll",
    "GetModuleHandleA": "kernel32.dll",
    "GetProcAddress": "kernel32.dll",
    "GetUserNameA": "advapi32.dll",
    "GetVolumeInformationA": "kernel32.dll",
    "IsDebuggerPresent": "kernel32.dll",
    "MessageBoxA": "user32.dll",
    "NtQueryInformationProcess": "ntdll.dll",
    "Process32First": "kernel32.dll",
    "Process32Next": "kernel32.dll",
    "ReadFile": "kernel32.dll",
    "RegOpenKeyExA": "advapi32.dll",
    "Sleep": "kernel32.dll",
    "lstrcmpiA": "kernel32.dll",
    "lstrcmpiW": "kernel32.dll",
}


def xor_encode(text: bytes, key: int) -> bytes:
    return bytes(b ^ key for b in text)


def add_rotate_encode(text: bytes, add: int, rot: int) -> bytes:
    """Inverse of the fixture's decoder: ``b = rol(e + add, rot)``."""
    out = bytearray()
    for b in text:
        r = ((b >> rot) | (b << (8 - rot))) & 0xFF
        out.append((r - add) & 0xFF)
    return bytes(out)


def wide(text: str) -> bytes:
    return text.encode("utf-16-le") + b"\0\0"


def cstr(text: str) -> bytes:
    return text.encode("ascii") + b"\0"


def stack_bytes(text: bytes, offset: int) -> str:
    """``mov byte ptr [ebp-offset+i], c`` for every byte of ``text``."""
    return "\n".join(f"  mov byte ptr [ebp-{offset - i:#x}], {b:#x}" for i, b in enumerate(text))


def stack_dwords(blob: bytes, offset: int) -> str:
    assert len(blob) % 4 == 0
    lines = []
    for i in range(0, len(blob), 4):
        value = int.from_bytes(blob[i:i + 4], "little")
        lines.append(f"  mov dword ptr [ebp-{offset - i:#x}], {value:#x}")
    return "\n".join(lines)


@dataclass
class Impl:
    tactic: str
    kind: str
    involves_string: bool


@dataclass
class Fixture:
    name: str
    asm: str
    data: dict[str, bytes] = field(default_factory=dict)
    imports: tuple[str, ...] = ()
    impls: tuple[Impl, ...] = ()


# --------------------------------------------------------------------------
# TADA fixtures

XOR_KEY = 0x5A
XOR_PLAIN = b"wireshark.exe"
ENC_STACK_KEY = 0x37
ENC_STACK_PLAIN = b"cuckoomon.dll\0\0\0"
ADD_ROT = (0x21, 3)
ADD_ROT_PLAIN = b"VBoxService.exe"
STACK_PLAIN = b"SbieDll.dll\0"

TADA = [
    Fixture(
        "vm_cpuid_hypervisor_bit",
        """
t0_begin:
  push ebp
  mov ebp, esp
  push ebx
  mov eax, 1
  cpuid
  bt ecx, 31
  jc found
t0_end:
  xor eax, eax
  jmp done
found:
  mov eax, 1
done:
  pop ebx
  pop ebp
  ret
""",
        impls=(Impl("VMEvasion", "Assembly", False),),
    ),
    Fixture(
        "dbg_rdtsc_delta",
        """
t0_begin:
  push ebp
  mov ebp, esp
  push esi
  push edi
  rdtsc
  mov esi, eax
  mov edi, edx
  mov ecx, 0x10
  xor eax, eax
  add eax, ecx
  rdtsc
  sub eax, esi
  cmp eax, 0x1000
  ja slow
t0_end:
  xor eax, eax
  jmp out
slow:
  mov eax, 1
out:
  pop edi
  pop esi
  pop ebp
  ret
""",
        impls=(Impl("DebuggerEvasion", "Assembly", False),),
    ),
    Fixture(
        "dbg_peb_flags",
        """
t0_begin:
  push ebp
  mov ebp, esp
  mov eax, dword ptr fs:[0x30]
  movzx ecx, byte ptr [eax+2]
  test ecx, ecx
  jnz debugged
t0_end:
t1_begin:
  mov eax, dword ptr fs:[0x30]
  mov ecx, dword ptr [eax+0x68]
  and ecx, 0x70
  cmp ecx, 0x70
  je debugged
t1_end:
  xor eax, eax
  pop ebp
  ret
debugged:
  mov eax, 1
  pop ebp
  ret
""",
        impls=(
            Impl("DebuggerEvasion", "Assembly", False),
            Impl("DebuggerEvasion", "Assembly", False),
        ),
    ),
    Fixture(
        "dbg_int2d_exception",
        """
t0_begin:
  push ebp
  mov ebp, esp
  push {L:handler}
  push dword ptr fs:[0]
  mov dword ptr fs:[0], esp
  xor eax, eax
  int 0x2d
  nop
  mov eax, 1
t0_end:
  pop dword ptr fs:[0]
  add esp, 4
  pop ebp
  ret
handler:
  xor eax, eax
  ret
""",
        impls=(Impl("DebuggerEvasion", "Assembly", False),),
    ),
    Fixture(
        "dbg_isdebuggerpresent",
        """
t0_begin:
  push ebp
  mov ebp, esp
  call dword ptr [{IsDebuggerPresent}]
t0_end:
  test eax, eax
  jnz quit
  mov eax, 0
  pop ebp
  ret
quit:
  mov eax, 1
  pop ebp
  ret
""",
        imports=("IsDebuggerPresent",),
        impls=(Impl("DebuggerEvasion", "DirectAPI", False),),
    ),
    Fixture(
        "dbg_checkremote_indirect",
        """
  push ebp
  mov ebp, esp
  sub esp, 8
  push esi
  call dword ptr [{GetCurrentProcess}]
t0_begin:
  mov esi, dword ptr [{CheckRemoteDebuggerPresent}]
  lea ecx, [ebp-4]
  push ecx
  push eax
  call esi
t0_end:
  cmp dword ptr [ebp-4], 0
  setne al
  movzx eax, al
  pop esi
  mov esp, ebp
  pop ebp
  ret
""",
        imports=("GetCurrentProcess", "CheckRemoteDebuggerPresent"),
        impls=(Impl("DebuggerEvasion", "IndirectAPI", False),),
    ),
    Fixture(
        "dbg_ntquery_debugport",
        """
t0_begin:
  push ebp
  mov ebp, esp
  sub esp, 4
  push 0
  push 4
  lea eax, [ebp-4]
  push eax
  push 7
  push -1
  call dword ptr [{NtQueryInformationProcess}]
t0_end:
  cmp dword ptr [ebp-4], 0
  setne al
  movzx eax, al
  leave
  ret
""",
        imports=("NtQueryInformationProcess",),
        impls=(Impl("DebuggerEvasion", "DirectAPI", False),),
    ),
    Fixture(
        "dbg_getprocaddress_resolve",
        """
t0_begin:
  push ebp
  mov ebp, esp
  push {s:kernel32}
  call dword ptr [{GetModuleHandleA}]
  push {s:api}
  push eax
  call dword ptr [{GetProcAddress}]
t0_end:
  test eax, eax
  jz none
  call eax
  pop ebp
  ret
none:
  xor eax, eax
  pop ebp
  ret
""",
        data={"kernel32": cstr("kernel32.dll"), "api": cstr("IsDebuggerPresent")},
        imports=("GetModuleHandleA", "GetProcAddress"),
        impls=(Impl("DebuggerEvasion", "IndirectAPI", True),),
    ),
    Fixture(
        "sbx_volume_serial",
        """
t0_begin:
  push ebp
  mov ebp, esp
  sub esp, 4
  push 0
  push 0
  push 0
  push 0
  lea eax, [ebp-4]
  push eax
  push 0
  push 0
  push {s:root}
  call dword ptr [{GetVolumeInformationA}]
t0_end:
  cmp dword ptr [ebp-4], 0xCD1A40
  sete al
  movzx eax, al
  leave
  ret
""",
        data={"root": cstr("C:\\")},
        imports=("GetVolumeInformationA",),
        impls=(Impl("SandboxEvasion", "DirectAPI", False),),
    ),
    Fixture(
        "sbx_username_check",
        """
t0_begin:
  push ebp
  mov ebp, esp
  sub esp, 0x108
  mov dword ptr [ebp-4], 0x100
  lea eax, [ebp-4]
  push eax
  lea eax, [ebp-0x104]
  push eax
  call dword ptr [{GetUserNameA}]
  push {s:user}
  lea eax, [ebp-0x104]
  push eax
  call dword ptr [{lstrcmpiA}]
t0_end:
  test eax, eax
  sete al
  movzx eax, al
  leave
  ret
""",
        data={"user": cstr("CurrentUser")},
        imports=("GetUserNameA", "lstrcmpiA"),
        impls=(Impl("SandboxEvasion", "DirectAPI", True),),
    ),
    Fixture(
        "sbx_stack_string_module",
        f"""
t0_begin:
  push ebp
  mov ebp, esp
  sub esp, 0x20
{stack_bytes(STACK_PLAIN, 0x20)}
  lea eax, [ebp-0x20]
  push eax
  call dword ptr [{{GetModuleHandleA}}]
t0_end:
  test eax, eax
  setne al
  movzx eax, al
  leave
  ret
""",
        imports=("GetModuleHandleA",),
        impls=(Impl("SandboxEvasion", "DirectAPI", True),),
    ),
    Fixture(
        "sbx_encoded_stack_string",
        f"""
  push ebp
  mov ebp, esp
  sub esp, 0x30
{stack_dwords(xor_encode(ENC_STACK_PLAIN, ENC_STACK_KEY), 0x30)}
  xor ecx, ecx
t0_begin:
decode:
  xor byte ptr [ebp+ecx-0x30], {ENC_STACK_KEY:#x}
  inc ecx
  cmp ecx, {len(ENC_STACK_PLAIN)}
  jb decode
t0_end:
  lea eax, [ebp-0x30]
  push eax
  call dword ptr [{{GetModuleHandleA}}]
  leave
  ret
""",
        imports=("GetModuleHandleA",),
        impls=(Impl("SandboxEvasion", "Assembly", True),),
    ),
    Fixture(
        "vm_vbox_registry_key",
        """
t0_begin:
  push ebp
  mov ebp, esp
  sub esp, 4
  lea eax, [ebp-4]
  push eax
  push 0x20019
  push 0
  push {s:key}
  push 0x80000002
  call dword ptr [{RegOpenKeyExA}]
t0_end:
  test eax, eax
  sete al
  movzx eax, al
  leave
  ret
""",
        data={"key": cstr("HARDWARE\\ACPI\\DSDT\\VBOX__")},
        imports=("RegOpenKeyExA",),
        impls=(Impl("VMEvasion", "DirectAPI", True),),
    ),
    Fixture(
        "vm_vmware_wide_compare",
        """
t0_begin:
  push ebp
  mov ebp, esp
  sub esp, 0x200
  push edi
  mov edi, dword ptr [{lstrcmpiW}]
  push {s:vendor}
  lea eax, [ebp-0x200]
  push eax
  call edi
t0_end:
  test eax, eax
  sete al
  movzx eax, al
  pop edi
  leave
  ret
""",
        data={"vendor": wide("VMware, Inc.")},
        imports=("lstrcmpiW",),
        impls=(Impl("VMEvasion", "IndirectAPI", True),),
    ),
    Fixture(
        "vm_sidt_redpill",
        """
t0_begin:
  push ebp
  mov ebp, esp
  sub esp, 8
  sidt [ebp-8]
  mov eax, dword ptr [ebp-6]
  shr eax, 24
  cmp eax, 0xd0
  ja vm
t0_end:
  xor eax, eax
  leave
  ret
vm:
  mov eax, 1
  leave
  ret
""",
        impls=(Impl("VMEvasion", "Assembly", False),),
    ),
    Fixture(
        "vm_add_rotate_decoded",
        f"""
  push ebp
  mov ebp, esp
  sub esp, 0x40
  push esi
  push edi
  lea edi, [ebp-0x40]
  mov esi, {{s:blob}}
  xor ecx, ecx
t0_begin:
decode:
  mov al, byte ptr [esi+ecx]
  add al, {ADD_ROT[0]:#x}
  rol al, {ADD_ROT[1]}
  mov byte ptr [edi+ecx], al
  inc ecx
  cmp ecx, {len(ADD_ROT_PLAIN)}
  jb decode
t0_end:
  mov byte ptr [edi+ecx], 0
  push edi
  lea eax, [ebp-0x80]
  push eax
  call dword ptr [{{lstrcmpiA}}]
  pop edi
  pop esi
  leave
  ret
""",
        data={"blob": add_rotate_encode(ADD_ROT_PLAIN, *ADD_ROT)},
        imports=("lstrcmpiA",),
        impls=(Impl("VMEvasion", "Assembly", True),),
    ),
    Fixture(
        "tool_process_scan",
        """
  push ebp
  mov ebp, esp
  sub esp, 0x130
  push ebx
  push 0
  push 2
  call dword ptr [{CreateToolhelp32Snapshot}]
  mov ebx, eax
  mov dword ptr [ebp-0x128], 0x128
  lea eax, [ebp-0x128]
  push eax
  push ebx
  call dword ptr [{Process32First}]
next:
t0_begin:
  push {s:tool}
  lea eax, [ebp-0x104]
  push eax
  call dword ptr [{lstrcmpiA}]
t0_end:
  test eax, eax
  jz hit
  lea eax, [ebp-0x128]
  push eax
  push ebx
  call dword ptr [{Process32Next}]
  test eax, eax
  jnz next
  xor eax, eax
  jmp leave_fn
hit:
  mov eax, 1
leave_fn:
  pop ebx
  leave
  ret
""",
        data={"tool": cstr("ollydbg.exe")},
        imports=("CreateToolhelp32Snapshot", "Process32First", "Process32Next", "lstrcmpiA"),
        impls=(Impl("AnalysisToolEvasion", "DirectAPI", True),),
    ),
    Fixture(
        "tool_window_probe",
        """
t0_begin:
  push ebp
  mov ebp, esp
  push 0
  push {s:cls}
  call dword ptr [{FindWindowA}]
t0_end:
  test eax, eax
  setne al
  movzx eax, al
  pop ebp
  ret
""",
        data={"cls": cstr("OLLYDBG")},
        imports=("FindWindowA",),
        impls=(Impl("AnalysisToolEvasion", "DirectAPI", True),),
    ),
    Fixture(
        "tool_xor_decoded_name",
        f"""
  push ebp
  mov ebp, esp
  sub esp, 0x40
  push esi
  push edi
  lea edi, [ebp-0x40]
  mov esi, {{s:blob}}
  xor ecx, ecx
t0_begin:
decode:
  mov al, byte ptr [esi+ecx]
  xor al, {XOR_KEY:#x}
  mov byte ptr [edi+ecx], al
  inc ecx
  cmp ecx, {len(XOR_PLAIN)}
  jb decode
t0_end:
  mov byte ptr [edi+ecx], 0
  push edi
  lea eax, [ebp-0x80]
  push eax
  call dword ptr [{{lstrcmpiA}}]
  pop edi
  pop esi
  leave
  ret
""",
        data={"blob": xor_encode(XOR_PLAIN, XOR_KEY)},
        imports=("lstrcmpiA",),
        impls=(Impl("AnalysisToolEvasion", "Assembly", True),),
    ),
]


# --------------------------------------------------------------------------
# Benign fixtures

BENIGN = [
    Fixture(
        "benign_arithmetic",
        """
  push ebp
  mov ebp, esp
  mov eax, dword ptr [ebp+8]
  mov ecx, dword ptr [ebp+0xc]
  add eax, ecx
  imul eax, eax, 3
  sub eax, 7
  pop ebp
  ret
""",
    ),
    Fixture(
        "benign_sum_loop",
        """
  push ebp
  mov ebp, esp
  push esi
  mov esi, {s:values}
  xor eax, eax
  xor ecx, ecx
sum:
  add eax, dword ptr [esi+ecx*4]
  inc ecx
  cmp ecx, 8
  jb sum
  pop esi
  pop ebp
  ret
""",
        data={"values": b"".join(i.to_bytes(4, "little") for i in range(1, 9))},
    ),
    Fixture(
        "benign_message_box",
        """
  push ebp
  mov ebp, esp
  push 0
  push {s:title}
  push {s:text}
  push 0
  call dword ptr [{MessageBoxA}]
  pop ebp
  ret
""",
        data={"text": cstr("Hello, world"), "title": cstr("Greeting")},
        imports=("MessageBoxA",),
    ),
    Fixture(
        "benign_stack_config_name",
        f"""
  push ebp
  mov ebp, esp
  sub esp, 0x20
{stack_bytes(b"config.ini" + bytes(1), 0x20)}
  push 0
  push 0x80
  push 3
  push 0
  push 1
  push 0x80000000
  lea eax, [ebp-0x20]
  push eax
  call dword ptr [{{CreateFileA}}]
  leave
  ret
""",
        imports=("CreateFileA",),
    ),
    Fixture(
        "benign_file_reader",
        """
  push ebp
  mov ebp, esp
  sub esp, 0x104
  push ebx
  push 0
  push 0x80
  push 3
  push 0
  push 1
  push 0x80000000
  push {s:path}
  call dword ptr [{CreateFileA}]
  mov ebx, eax
  cmp ebx, -1
  je fail
  push 0
  lea eax, [ebp-4]
  push eax
  push 0x100
  lea eax, [ebp-0x104]
  push eax
  push ebx
  call dword ptr [{ReadFile}]
  push ebx
  call dword ptr [{CloseHandle}]
  call pause_briefly
  mov eax, 1
  jmp done
fail:
  xor eax, eax
done:
  pop ebx
  leave
  ret
pause_briefly:
  push 1000
  call dword ptr [{Sleep}]
  ret
""",
        data={"path": cstr("C:\\data\\report.txt")},
        imports=("CreateFileA", "ReadFile", "CloseHandle", "Sleep"),
    ),
    Fixture(
        "benign_strlen",
        """
  push ebp
  mov ebp, esp
  mov edx, {s:label}
  xor eax, eax
scan:
  movzx ecx, byte ptr [edx+eax]
  inc eax
  test ecx, ecx
  jnz scan
  dec eax
  pop ebp
  ret
""",
        data={"label": cstr("Quarterly totals")},
    ),
]


# --------------------------------------------------------------------------
# Build

def _layout_data(data: dict[str, bytes]) -> tuple[dict[str, int], bytes]:
    addrs, blob = {}, bytearray()
    for key, value in data.items():
        addrs[key] = DATA_BASE + len(blob)
        blob += value + b"\0"
        blob += bytes(-len(blob) % 16)
    return addrs, bytes(blob)


def assemble(fx: Fixture, ks) -> tuple[bytes, dict[str, int], str, dict[str, int], bytes]:
    """Assemble ``fx``; ``{L:name}`` operands are resolved with a second pass
    because keystone cannot fix up forward labels used as immediates."""
    data_addrs, blob = _layout_data(fx.data)
    slots = {name: IAT_BASE + 4 * i for i, name in enumerate(fx.imports)}
    label_refs = sorted(set(re.findall(r"\{L:(\w+)\}", fx.asm)))
    range_labels = sorted(set(re.findall(r"^(t\d+_(?:begin|end)):", fx.asm, re.M)))
    probed = range_labels + label_refs

    def render(label_values: dict[str, int]) -> str:
        def subst(m):
            key = m.group(1)
            if key.startswith("s:"):
                return f"{data_addrs[key[2:]]:#x}"
            if key.startswith("L:"):
                return f"{label_values.get(key[2:], CODE_BASE):#x}"
            return f"{slots[key]:#x}"
        return re.sub(r"\{([A-Za-z0-9_:]+)\}", subst, fx.asm)

    def run(source: str) -> tuple[bytes, dict[str, int]]:
        probe = source + ("\n.long " + ", ".join(probed) if probed else "")
        encoding, _ = ks.asm(probe, CODE_BASE)
        code = bytes(encoding)
        if not probed:
            return code, {}
        tail = code[-4 * len(probed):]
        values = {lab: int.from_bytes(tail[4 * i:4 * i + 4], "little") for i, lab in enumerate(probed)}
        return code[:-4 * len(probed)], values

    source = render({})
    code, values = run(source)
    if label_refs:
        source = render(values)
        code, again = run(source)
        assert again == values, f"{fx.name}: label layout changed between passes"
    return code, values, source, slots, blob


def manifest_for(fx: Fixture, code: bytes, slots: dict[str, int], blob: bytes) -> str:
    manifest = {"base": f"{CODE_BASE:#x}", "code_hex": code.hex()}
    if blob:
        manifest["data"] = [{"address": f"{DATA_BASE:#x}", "hex": blob.hex()}]
    manifest["imports"] = [
        {"library": LIBRARY[name], "symbol": name, "slot": f"{slot:#x}"} for name, slot in slots.items()
    ]
    header = f"# {fx.name}: generated by tools/build_corpus.py, do not edit\n"
    return header + render_manifest(manifest)


def build(out_dir: Path) -> None:
    ks = keystone.Ks(keystone.KS_ARCH_X86, keystone.KS_MODE_32)
    (out_dir / "fixtures").mkdir(parents=True, exist_ok=True)
    (out_dir / "asm").mkdir(parents=True, exist_ok=True)
    gt = ["# Ground truth for the committed fixture corpus.",
          "# impl <id> <tactic> <kind> <string|nostring> <lo>-<hi>[,<lo>-<hi>...]", ""]
    for fx in TADA + BENIGN:
        code, labels, source, slots, blob = assemble(fx, ks)
        rel = f"fixtures/{fx.name}.fixture"
        (out_dir / rel).write_text(manifest_for(fx, code, slots, blob))
        (out_dir / "asm" / f"{fx.name}.asm").write_text(source.strip() + "\n")
        gt.append(f"sample {rel}")
        for i, impl in enumerate(fx.impls):
            lo, hi = labels[f"t{i}_begin"], labels[f"t{i}_end"]
            flag = "string" if impl.involves_string else "nostring"
            gt.append(f"impl {fx.name}/{i} {impl.tactic} {impl.kind} {flag} {lo:#x}-{hi:#x}")
        gt.append("")
    (out_dir / "ground_truth.txt").write_text("\n".join(gt))


if __name__ == "__main__":
    build(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "corpus")
