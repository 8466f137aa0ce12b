"""String evidence: static strings behind operands, and strings recovered
by emulating functions that look like they decode or assemble text."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..disasm import BasicBlock, ControlFlowGraph, canonical_register, has_single_block_loop
from ..emulator import Emulator, run_function
from ..loader import BinaryImage
from . import Feature, FeatureKind, quote

__all__ = [
    "EmulationTriggerConfig",
    "Encoding",
    "Origin",
    "RecoveredString",
    "EmulationReason",
    "EmulationResult",
    "read_string",
    "printable_runs",
    "extract_plain_strings",
    "should_emulate",
    "emulate_for_strings",
    "string_features",
]

MAX_STRING_SCAN = 1024


@dataclass(frozen=True)
class EmulationTriggerConfig:
    min_consecutive_movs: int = 6
    min_string_length: int = 4
    max_steps: int = 100_000

    def __post_init__(self):
        if min(self.min_consecutive_movs, self.min_string_length, self.max_steps) < 1:
            raise ValueError("emulation trigger settings must be >= 1")


class Encoding(enum.Enum):
    ASCII = "ascii"
    UTF16LE = "utf16le"


class Origin(enum.Enum):
    PLAIN = "Plain"
    EMULATED = "Emulated"


@dataclass(frozen=True)
class RecoveredString:
    value: str
    encoding: Encoding
    origin: Origin
    attributed_block: tuple[int, int]
    address: int
    written_by: int


def _ascii_printable(b: int) -> bool:
    return 0x20 <= b < 0x7F or b == 0x09


def _wide_printable(unit: int) -> bool:
    # printable byte followed by NUL
    return unit < 0x100 and _ascii_printable(unit)


def read_string(image: BinaryImage, va: int, min_length: int = 4, width: Encoding | None = None) -> tuple[str, Encoding] | None:
    """NUL-terminated printable string at ``va``; never reads past its section.

    ``width`` forces one encoding; otherwise UTF-16LE is tried first, then ASCII.
    """
    raw = image.read_until_end(va, MAX_STRING_SCAN * 2 + 2)
    if not raw:
        return None
    if width in (None, Encoding.UTF16LE):
        chars = []
        for i in range(0, len(raw) - 1, 2):
            unit = raw[i] | raw[i + 1] << 8
            if unit == 0:
                if len(chars) >= min_length:
                    return "".join(chars), Encoding.UTF16LE
                break
            if not _wide_printable(unit):
                break
            chars.append(chr(unit))
    if width in (None, Encoding.ASCII):
        end = raw.find(b"\0")
        if end >= min_length and all(_ascii_printable(b) for b in raw[:end]):
            return raw[:end].decode("ascii"), Encoding.ASCII
    return None


def printable_runs(buf: bytes, min_length: int) -> list[tuple[int, str, Encoding]]:
    """(offset, text, encoding) for every maximal printable run in ``buf``."""
    out = []
    i, n = 0, len(buf)
    while i < n:
        # wide run: printable byte followed by NUL, repeated
        j = i
        while j + 1 < n and _ascii_printable(buf[j]) and buf[j + 1] == 0:
            j += 2
        if (j - i) // 2 >= min_length:
            out.append((i, buf[i:j:2].decode("ascii"), Encoding.UTF16LE))
            i = j
            continue
        j = i
        while j < n and _ascii_printable(buf[j]):
            j += 1
        if j - i >= min_length:
            out.append((i, buf[i:j].decode("ascii"), Encoding.ASCII))
            i = j
            continue
        i += 1
    return out


def _string_feature(value: str, block: BasicBlock, address: int) -> Feature:
    return Feature(FeatureKind.STRING_REF, f"String Reference: {quote(value)}", block.id, address)


def extract_plain_strings(block: BasicBlock, image: BinaryImage, config: EmulationTriggerConfig | None = None) -> list[Feature]:
    """``String Reference`` features for operands that point at static strings."""
    config = config or EmulationTriggerConfig()
    out, seen = [], set()
    for insn in block.instructions:
        if insn.transfers_control:
            continue
        for op in insn.operands:
            if op.kind == "imm":
                va = op.immediate
            elif op.kind == "mem" and op.segment not in ("fs", "gs") and op.displacement:
                va = op.displacement & 0xFFFFFFFF
            else:
                continue
            found = read_string(image, va, config.min_string_length)
            if found and found[0] not in seen:
                seen.add(found[0])
                out.append(_string_feature(found[0], block, insn.address))
    return out


# --------------------------------------------------------------------------
# Emulation trigger

class EmulationReason(enum.Enum):
    SINGLE_BLOCK_LOOP = "SingleBlockLoop"
    CONSECUTIVE_MOVS = "ConsecutiveMovs"
    NO = "No"


def _is_data_address(image: BinaryImage, va: int) -> bool:
    sec = image.section_at(va)
    return sec is not None and not sec.executable


def _stack_relative(op) -> bool:
    return op.kind == "mem" and op.segment in (None, "ss", "ds") and op.base in ("esp", "ebp")


def _longest_stack_fill(block: BasicBlock, image: BinaryImage) -> int:
    """Most stack stores of immediates or data-loaded registers in one run of movs."""
    best = count = 0
    loaded: set[str] = set()
    for insn in block.instructions:
        ok = False
        if insn.mnemonic == "mov" and len(insn.operands) == 2:
            dst, src = insn.operands
            if _stack_relative(dst) and (
                src.kind == "imm" or (src.kind == "reg" and canonical_register(src.register) in loaded)
            ):
                count += 1
                ok = True
            elif dst.kind == "reg" and src.is_absolute and _is_data_address(image, src.displacement & 0xFFFFFFFF):
                loaded.add(canonical_register(dst.register))
                ok = True
        if not ok:
            best = max(best, count)
            count = 0
            loaded.clear()
    return max(best, count)


def should_emulate(cfg: ControlFlowGraph, image: BinaryImage, config: EmulationTriggerConfig | None = None) -> tuple[bool, EmulationReason]:
    config = config or EmulationTriggerConfig()
    if has_single_block_loop(cfg):
        return True, EmulationReason.SINGLE_BLOCK_LOOP
    for block in cfg:
        if _longest_stack_fill(block, image) >= config.min_consecutive_movs:
            return True, EmulationReason.CONSECUTIVE_MOVS
    return False, EmulationReason.NO


# --------------------------------------------------------------------------
# Emulation

@dataclass(frozen=True)
class EmulationResult:
    strings: tuple[RecoveredString, ...]
    steps: int
    budget_exceeded: bool
    memory: dict[int, int]

    def __iter__(self):
        return iter(self.strings)

    def __len__(self) -> int:
        return len(self.strings)

    @property
    def values(self) -> list[str]:
        return [s.value for s in self.strings]


def emulate_for_strings(cfg: ControlFlowGraph, image: BinaryImage, config: EmulationTriggerConfig | None = None) -> EmulationResult:
    """Run the function in a scratch machine and harvest strings from written memory.

    Each string is attributed to the block holding the instruction that
    last wrote any of its bytes.  A hit step cap still returns what was
    written so far, with ``budget_exceeded`` set.
    """
    config = config or EmulationTriggerConfig()
    emu = Emulator(image)
    outcome = run_function(emu, cfg, config.max_steps)

    found = []
    addrs = sorted(emu.memory)
    start = 0
    while start < len(addrs):
        end = start
        while end + 1 < len(addrs) and addrs[end + 1] == addrs[end] + 1:
            end += 1
        base = addrs[start]
        buf = bytes(emu.memory[a] for a in addrs[start:end + 1])
        for off, text, enc in printable_runs(buf, config.min_string_length):
            span = len(text) * (2 if enc is Encoding.UTF16LE else 1)
            last = max((emu.writes[base + off + k] for k in range(span)), key=lambda w: w[0])
            block = cfg.block_containing(last[1])
            found.append(RecoveredString(text, enc, Origin.EMULATED, block.id, base + off, last[1]))
        start = end + 1
    return EmulationResult(tuple(found), outcome.steps, outcome.budget_exceeded, emu.memory_image())


def string_features(cfg: ControlFlowGraph, image: BinaryImage, config: EmulationTriggerConfig | None = None) -> dict[int, list[Feature]]:
    """All string features of a function keyed by block start.

    Plain strings first, then emulated ones not already reported for that block.
    """
    config = config or EmulationTriggerConfig()
    out = {b.start: extract_plain_strings(b, image, config) for b in cfg}
    trigger, _ = should_emulate(cfg, image, config)
    if trigger:
        for rs in emulate_for_strings(cfg, image, config):
            block = cfg.blocks[rs.attributed_block[1]]
            feats = out[block.start]
            feat = _string_feature(rs.value, block, rs.written_by)
            if all(f.text != feat.text for f in feats):
                feats.append(feat)
    return out
