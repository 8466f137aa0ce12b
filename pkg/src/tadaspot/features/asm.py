"""Uncommon-mnemonic and segment-register features, with explanation text."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from ..disasm import BasicBlock
from . import Feature, FeatureKind, hex_h

__all__ = [
    "MNEMONIC_EXPLANATIONS",
    "FS_OFFSET_EXPLANATIONS",
    "AugmentationTable",
    "DEFAULT_TABLE",
    "scan_uncommon_mnemonics",
    "scan_segment_access",
    "asm_features",
]

_EFLAGS = "Can be used to read/write EFLAGS register"

MNEMONIC_EXPLANATIONS = MappingProxyType({
    "pushf": _EFLAGS,
    "pushfd": _EFLAGS,
    "popf": _EFLAGS,
    "popfd": _EFLAGS,
    "pushfq": _EFLAGS,
    "popfq": _EFLAGS,
    "int": "CPU Interrupt",
    "icebp": "Tracing technique, Single Step Exception",
    "bts": "Set trap flag when number is exactly 8",
    "rdtsc": "Read time-stamp counter",
    "sidt": "Access Interupt Descriptor Table",
    "sldt": "Access Local Descriptor Table",
    "sgdt": "Access Global Descriptor Table",
    "str": "Store Task Register",
    "cpuid": "Processor information",
})

FS_OFFSET_EXPLANATIONS = MappingProxyType({
    0x0: "Current Structured Exception Handling (SEH) frame",
    0x4: "Stack Base / Bottom of stack (high address)",
    0x8: "Stack Limit / Ceiling of stack (low address)",
    0xC: "SubSystemTib",
    0x10: "Fiber data",
    0x14: "Arbitrary data slot",
    0x18: "Linear address of TEB",
    0x1C: "Environment Pointer",
    0x20: "Process ID (in some Windows distributions this field is used as DebugContext)",
    0x24: "Current thread ID",
    0x28: "Active RPC Handle",
    0x2C: "Linear address of the thread-local storage array",
    0x30: "Linear address of Process Environment Block (PEB)",
    0x34: "Last error number",
    0x38: "Count of owned critical sections",
    0x3C: "Address of CSR Client Thread",
    0x40: "Win32 Thread Information",
    0x44: "Win32 client information (NT), user32 private data (Wine)",
    0xC0: "Pointer to FastSysCall in Wow64",
    0xC4: "Current Locale",
    0xC8: "FP Software Status Register",
    0xCC: "Reserved for OS (NT), kernel32 private data (Wine)",
    0x1A4: "Exception code",
    0x1A8: "Activation context stack",
    0x6E8: "Real Process ID",
    0x6EC: "Real Thread ID",
})

UNKNOWN_FIELD = "unknown field"

# decoder spellings folded onto table mnemonics: (mnemonic, interrupt number)
_MNEMONIC_ALIASES = {
    "int3": ("int", 3),
    "int1": ("icebp", None),
    "into": ("int", 4),
}


@dataclass(frozen=True)
class AugmentationTable:
    mnemonic_explanations: Mapping[str, str] = field(default_factory=lambda: MNEMONIC_EXPLANATIONS)
    segment_offsets: Mapping[tuple[str, int], str] = field(
        default_factory=lambda: MappingProxyType({("fs", k): v for k, v in FS_OFFSET_EXPLANATIONS.items()})
    )


DEFAULT_TABLE = AugmentationTable()


def _int_label(value: int) -> str:
    return str(value) if value < 10 else hex_h(value)


def scan_uncommon_mnemonics(block: BasicBlock, table: AugmentationTable = DEFAULT_TABLE) -> list[Feature]:
    out = []
    for insn in block.instructions:
        mnemonic, number = _MNEMONIC_ALIASES.get(insn.mnemonic, (insn.mnemonic, None))
        explanation = table.mnemonic_explanations.get(mnemonic)
        if explanation is None:
            continue
        label = mnemonic
        if mnemonic == "int":
            if number is None and insn.operands and insn.operands[0].kind == "imm":
                number = insn.operands[0].immediate
            if number is not None:
                label = f"int {_int_label(number)}"
        out.append(Feature(FeatureKind.UNCOMMON_INS, f"Uncommon INS: {label} ({explanation})",
                           block.id, insn.address))
    return out


def scan_segment_access(block: BasicBlock, table: AugmentationTable = DEFAULT_TABLE) -> list[Feature]:
    out = []
    for insn in block.instructions:
        for op in insn.operands:
            if op.kind != "mem" or op.segment not in ("fs", "gs") or not op.is_absolute:
                continue
            offset = op.displacement & 0xFFFFFFFF
            explanation = table.segment_offsets.get((op.segment, offset), UNKNOWN_FIELD)
            out.append(Feature(
                FeatureKind.SEGMENT_ACCESS,
                f"Segment Register Access: {op.segment}:{hex_h(offset)} ({explanation})",
                block.id,
                insn.address,
            ))
    return out


def asm_features(block: BasicBlock, table: AugmentationTable = DEFAULT_TABLE) -> list[Feature]:
    """Both assembly scans merged in instruction order."""
    found = scan_uncommon_mnemonics(block, table) + scan_segment_access(block, table)
    return sorted(found, key=lambda f: f.source_address)
