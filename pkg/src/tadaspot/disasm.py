"""Instruction decoding, function recovery, CFGs and backward register tracing.

Decoding goes through a small contract (``decode(code, address) ->
Instruction``) so the rest of the pipeline never touches capstone objects
directly.  :class:`CapstoneDecoder` is the default implementation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import capstone
from capstone import x86_const

from .loader import BinaryImage

log = logging.getLogger(__name__)

__all__ = [
    "DecodeError",
    "EntryOutOfRange",
    "Operand",
    "Instruction",
    "Decoder",
    "CapstoneDecoder",
    "BasicBlock",
    "ControlFlowGraph",
    "Concrete",
    "LoadFrom",
    "Unknown",
    "UNKNOWN",
    "ValueSource",
    "DataFlowTrace",
    "canonical_register",
    "disassemble_function",
    "build_cfg",
    "function_cfg",
    "discover_functions",
    "has_single_block_loop",
    "trace_register_back",
    "value_before",
    "build_dataflow",
]

MAX_INSN_LEN = 15
MAX_TRACE_DEFS = 64

_ALIASES = {
    "eax": ("al", "ah", "ax"),
    "ebx": ("bl", "bh", "bx"),
    "ecx": ("cl", "ch", "cx"),
    "edx": ("dl", "dh", "dx"),
    "esi": ("si", "sil"),
    "edi": ("di", "dil"),
    "ebp": ("bp", "bpl"),
    "esp": ("sp", "spl"),
}
_CANONICAL = {alias: full for full, names in _ALIASES.items() for alias in names}
_CANONICAL.update({full: full for full in _ALIASES})
GPRS = tuple(_ALIASES)

# caller-saved under the Windows x86 conventions
CALL_CLOBBERS = frozenset({"eax", "ecx", "edx"})

RET_MNEMONICS = frozenset({"ret", "retn", "retf", "iret", "iretd"})
JMP_MNEMONICS = frozenset({"jmp", "ljmp"})
CALL_MNEMONICS = frozenset({"call", "lcall"})
LOOP_MNEMONICS = frozenset({"loop", "loope", "loopne", "jecxz", "jcxz"})


def canonical_register(name: str | None) -> str | None:
    """Map a (sub)register name onto its 32-bit GPR, or return it unchanged."""
    if name is None:
        return None
    return _CANONICAL.get(name, name)


class DecodeError(Exception):
    def __init__(self, address: int, message: str = "undecodable bytes"):
        super().__init__(f"{address:#x}: {message}")
        self.address = address


class EntryOutOfRange(Exception):
    pass


@dataclass(frozen=True)
class Operand:
    kind: str  # "reg", "imm" or "mem"
    size: int
    register: str | None = None
    immediate: int | None = None
    segment: str | None = None
    base: str | None = None
    index: str | None = None
    scale: int = 1
    displacement: int = 0

    def __post_init__(self):
        if self.kind == "imm" and self.immediate is None:
            raise ValueError("immediate operand without a value")
        if self.kind == "reg" and self.register is None:
            raise ValueError("register operand without a register")

    @property
    def is_absolute(self) -> bool:
        """Memory operand addressed by displacement alone."""
        return self.kind == "mem" and self.base is None and self.index is None


@dataclass(frozen=True)
class Instruction:
    address: int
    size: int
    mnemonic: str
    operands: tuple[Operand, ...]
    raw: bytes = field(repr=False)
    op_str: str = ""
    regs_written: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("instruction length must be >= 1")

    @property
    def next_address(self) -> int:
        return self.address + self.size

    @property
    def is_ret(self) -> bool:
        return self.mnemonic in RET_MNEMONICS

    @property
    def is_jump(self) -> bool:
        return self.mnemonic in JMP_MNEMONICS

    @property
    def is_call(self) -> bool:
        return self.mnemonic in CALL_MNEMONICS

    @property
    def is_conditional(self) -> bool:
        m = self.mnemonic
        return m in LOOP_MNEMONICS or (m.startswith("j") and m not in JMP_MNEMONICS)

    @property
    def transfers_control(self) -> bool:
        return self.is_ret or self.is_jump or self.is_call or self.is_conditional

    @property
    def branch_target(self) -> int | None:
        """Direct target of a jump, conditional branch or call."""
        if not (self.is_jump or self.is_call or self.is_conditional):
            return None
        if self.operands and self.operands[0].kind == "imm":
            return self.operands[0].immediate & 0xFFFFFFFF
        return None

    def __str__(self) -> str:
        return f"{self.address:#x}: {self.mnemonic} {self.op_str}".rstrip()


class Decoder(Protocol):
    def decode(self, code: bytes, address: int) -> Instruction: ...


class CapstoneDecoder:
    """x86-32 decoder backed by capstone."""

    def __init__(self):
        self._cs = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_32)
        self._cs.detail = True

    def _operand(self, insn, op) -> Operand:
        if op.type == x86_const.X86_OP_REG:
            return Operand("reg", op.size, register=insn.reg_name(op.reg))
        if op.type == x86_const.X86_OP_IMM:
            return Operand("imm", op.size, immediate=op.imm & 0xFFFFFFFF)
        mem = op.mem
        return Operand(
            "mem",
            op.size,
            segment=insn.reg_name(mem.segment) if mem.segment else None,
            base=insn.reg_name(mem.base) if mem.base else None,
            index=insn.reg_name(mem.index) if mem.index else None,
            scale=mem.scale,
            displacement=mem.disp,
        )

    def decode(self, code: bytes, address: int) -> Instruction:
        try:
            insn = next(self._cs.disasm(code[:MAX_INSN_LEN], address, count=1))
        except StopIteration:
            raise DecodeError(address) from None
        try:
            _, written = insn.regs_access()
            regs_written = frozenset(canonical_register(insn.reg_name(r)) for r in written)
        except capstone.CsError:
            regs_written = frozenset()
        return Instruction(
            address=insn.address,
            size=insn.size,
            mnemonic=insn.mnemonic,
            operands=tuple(self._operand(insn, op) for op in insn.operands),
            raw=bytes(insn.bytes),
            op_str=insn.op_str,
            regs_written=regs_written,
        )


_default_decoder: CapstoneDecoder | None = None


def default_decoder() -> CapstoneDecoder:
    global _default_decoder
    if _default_decoder is None:
        _default_decoder = CapstoneDecoder()
    return _default_decoder


# --------------------------------------------------------------------------
# Recursive descent

def _decode_at(image: BinaryImage, address: int, decoder: Decoder) -> Instruction | None:
    sec = image.section_at(address)
    if sec is None or not sec.executable:
        return None
    return decoder.decode(image.read_until_end(address, MAX_INSN_LEN), address)


def disassemble_function(
    image: BinaryImage,
    entry: int,
    decoder: Decoder | None = None,
    errors: list[DecodeError] | None = None,
    max_instructions: int = 200_000,
) -> list[Instruction]:
    """Recursive-descent decode of the code reachable from ``entry``.

    Follows fallthrough and direct branch targets, not call targets.  Paths
    end at ``ret``, indirect jumps, undecodable bytes (appended to
    ``errors``) and section boundaries.
    """
    decoder = decoder or default_decoder()
    sec = image.section_at(entry)
    if sec is None or not sec.executable:
        raise EntryOutOfRange(f"{entry:#x} is not inside an executable section")

    insns: dict[int, Instruction] = {}
    work = [entry]
    while work and len(insns) < max_instructions:
        addr = work.pop()
        while addr not in insns:
            try:
                insn = _decode_at(image, addr, decoder)
            except DecodeError as exc:
                log.debug("decode failed: %s", exc)
                if errors is not None:
                    errors.append(exc)
                break
            if insn is None:
                break
            insns[addr] = insn
            if insn.is_ret:
                break
            target = insn.branch_target
            if insn.is_jump:
                if target is None:
                    break
                addr = target
                continue
            if insn.is_conditional and target is not None:
                work.append(target)
            addr = insn.next_address
    return [insns[a] for a in sorted(insns)]


# --------------------------------------------------------------------------
# CFG

@dataclass(frozen=True)
class BasicBlock:
    function_entry: int
    start: int
    instructions: tuple[Instruction, ...]
    successors: tuple[int, ...]

    @property
    def id(self) -> tuple[int, int]:
        return (self.function_entry, self.start)

    @property
    def last(self) -> Instruction:
        return self.instructions[-1]

    @property
    def end(self) -> int:
        return self.last.next_address

    @property
    def addresses(self) -> list[int]:
        return [i.address for i in self.instructions]

    def __len__(self) -> int:
        return len(self.instructions)


@dataclass(frozen=True)
class ControlFlowGraph:
    function_entry: int
    blocks: dict[int, BasicBlock]

    def __post_init__(self):
        if self.function_entry not in self.blocks:
            raise ValueError("function entry has no block")
        preds: dict[int, list[int]] = {s: [] for s in self.blocks}
        owner: dict[int, int] = {}
        for start, block in self.blocks.items():
            for succ in block.successors:
                if succ not in preds:
                    raise ValueError(f"edge {start:#x} -> {succ:#x} has no target block")
                preds[succ].append(start)
            for insn in block.instructions:
                owner[insn.address] = start
        object.__setattr__(self, "_preds", {k: tuple(v) for k, v in preds.items()})
        object.__setattr__(self, "_owner", owner)

    def __iter__(self):
        return iter(self.blocks.values())

    def __len__(self) -> int:
        return len(self.blocks)

    def predecessors(self, start: int) -> tuple[int, ...]:
        return self._preds.get(start, ())

    def block_containing(self, address: int) -> BasicBlock | None:
        start = self._owner.get(address)
        return None if start is None else self.blocks[start]

    def instruction_at(self, address: int) -> Instruction | None:
        block = self.block_containing(address)
        if block is None:
            return None
        for insn in block.instructions:
            if insn.address == address:
                return insn
        return None

    def instructions(self) -> Iterable[Instruction]:
        for block in self.blocks.values():
            yield from block.instructions


def build_cfg(instructions: Sequence[Instruction], entry: int) -> ControlFlowGraph:
    """Split a decoded instruction set into basic blocks.

    Blocks end after any control transfer (calls included) and before any
    branch target.  Successors: conditional -> (target, fallthrough),
    jmp -> (target,), call -> (fallthrough,), ret -> ().
    """
    by_addr = {i.address: i for i in instructions}
    if entry not in by_addr:
        raise ValueError(f"entry {entry:#x} not among the decoded instructions")

    leaders = {entry}
    fall_preds: dict[int, int] = {}
    for insn in instructions:
        nxt = insn.next_address
        if insn.transfers_control:
            if nxt in by_addr and not (insn.is_ret or insn.is_jump):
                leaders.add(nxt)
            target = insn.branch_target
            if target in by_addr and not insn.is_call:
                leaders.add(target)
        elif nxt in by_addr:
            fall_preds[nxt] = fall_preds.get(nxt, 0) + 1
    leaders.update(a for a, n in fall_preds.items() if n > 1)
    # anything nobody falls into starts a block
    leaders.update(a for a in by_addr if a not in fall_preds)

    blocks: dict[int, BasicBlock] = {}
    for start in sorted(leaders):
        body = []
        cur = by_addr[start]
        while True:
            body.append(cur)
            if cur.transfers_control:
                break
            nxt = cur.next_address
            if nxt not in by_addr or nxt in leaders:
                break
            cur = by_addr[nxt]
        last = body[-1]
        nxt = last.next_address
        if last.is_ret:
            succ = []
        elif last.is_jump:
            succ = [last.branch_target] if last.branch_target in by_addr else []
        elif last.is_conditional:
            succ = [t for t in (last.branch_target, nxt) if t in by_addr]
        else:
            succ = [nxt] if nxt in by_addr else []
        blocks[start] = BasicBlock(entry, start, tuple(body), tuple(dict.fromkeys(succ)))
    return ControlFlowGraph(entry, blocks)


def function_cfg(
    image: BinaryImage,
    entry: int,
    decoder: Decoder | None = None,
    errors: list[DecodeError] | None = None,
) -> ControlFlowGraph:
    return build_cfg(disassemble_function(image, entry, decoder, errors), entry)


def discover_functions(image: BinaryImage, decoder: Decoder | None = None) -> list[int]:
    """Entry point plus direct call targets found by a linear sweep, sorted."""
    decoder = decoder or default_decoder()
    entries = {image.entry_point}
    for sec in image.executable_sections():
        addr = sec.virtual_address
        while addr < sec.end:
            try:
                insn = decoder.decode(image.read_until_end(addr, MAX_INSN_LEN), addr)
            except DecodeError:
                addr += 1
                continue
            target = insn.branch_target
            if insn.is_call and target is not None:
                tsec = image.section_at(target)
                if tsec is not None and tsec.executable:
                    entries.add(target)
            addr = insn.next_address
    return sorted(entries)


def has_single_block_loop(cfg: ControlFlowGraph) -> set[int]:
    return {b.start for b in cfg if b.start in b.successors}


# --------------------------------------------------------------------------
# Backward value recovery

@dataclass(frozen=True)
class Concrete:
    value: int


@dataclass(frozen=True)
class LoadFrom:
    address: int


@dataclass(frozen=True)
class Unknown:
    pass


UNKNOWN = Unknown()
ValueSource = Concrete | LoadFrom | Unknown


def _written(insn: Instruction) -> frozenset[str]:
    if insn.is_call:
        return insn.regs_written | CALL_CLOBBERS
    return insn.regs_written


def _definition(insn: Instruction, reg: str) -> ValueSource | str:
    """What ``insn`` stores into ``reg``: a value, a source register, or Unknown."""
    if insn.mnemonic != "mov" or len(insn.operands) != 2:
        return UNKNOWN
    dst, src = insn.operands
    if dst.kind != "reg" or dst.size != 4 or canonical_register(dst.register) != reg:
        return UNKNOWN
    if src.kind == "imm":
        return Concrete(src.immediate & 0xFFFFFFFF)
    if src.kind == "reg" and src.size == 4:
        return canonical_register(src.register)
    if src.is_absolute and src.segment in (None, "ds"):
        return LoadFrom(src.displacement & 0xFFFFFFFF)
    return UNKNOWN


def _resolve(cfg, block, stop, reg, on_path, budget) -> ValueSource:
    for insn in reversed(block.instructions[:stop]):
        if reg not in _written(insn):
            continue
        budget[0] += 1
        if budget[0] > MAX_TRACE_DEFS:
            return UNKNOWN
        found = _definition(insn, reg)
        if isinstance(found, str):
            reg = found
            continue
        return found
    preds = cfg.predecessors(block.start)
    if not preds:
        return UNKNOWN
    results = set()
    for p in preds:
        if p in on_path:
            return UNKNOWN
        pb = cfg.blocks[p]
        results.add(_resolve(cfg, pb, len(pb.instructions), reg, on_path | {p}, budget))
        if len(results) > 1:
            return UNKNOWN
    return results.pop()


def value_before(cfg: ControlFlowGraph, address: int, register: str) -> ValueSource:
    """Value held by ``register`` just before the instruction at ``address``.

    Intra-procedural; only ``mov r,imm``, ``mov r,r`` and ``mov r,[abs]``
    propagate, loop back-edges are not crossed, and all predecessor paths
    must agree.
    """
    block = cfg.block_containing(address)
    reg = canonical_register(register)
    if block is None or reg not in GPRS:
        return UNKNOWN
    stop = block.addresses.index(address)
    return _resolve(cfg, block, stop, reg, frozenset({block.start}), [0])


def trace_register_back(cfg: ControlFlowGraph, call_site: int, register: str) -> ValueSource:
    return value_before(cfg, call_site, register)


@dataclass(frozen=True)
class DataFlowTrace:
    function_entry: int
    definitions: dict[tuple[int, str], ValueSource]


def build_dataflow(cfg: ControlFlowGraph) -> DataFlowTrace:
    """Value source for every 32-bit GPR definition in the function."""
    defs: dict[tuple[int, str], ValueSource] = {}
    for insn in cfg.instructions():
        for reg in sorted(_written(insn) & set(GPRS)):
            found = _definition(insn, reg)
            if isinstance(found, str):
                found = value_before(cfg, insn.address, found)
            defs[(insn.address, reg)] = found
    return DataFlowTrace(cfg.function_entry, defs)
