"""A deliberately small x86-32 interpreter for string recovery.

Covers the instructions decode loops and stack-string setup are built from:
data movement, add/sub/xor/or/and, shifts and rotates, inc/dec/not/neg,
cmp/test with the conditional branches, push/pop, lea, loop.  Anything else
zeroes its destination.  Calls are skipped and return 0 in eax; ``ret``
halts.  Reads of unwritten memory fall back to the image, then to zero, so
data sections behave copy-on-write.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .disasm import GPRS, ControlFlowGraph, Instruction, Operand, canonical_register
from .loader import BinaryImage

__all__ = ["STACK_TOP", "EmulationOutcome", "Emulator", "run_function"]

STACK_TOP = 0x0FFF0000
MASK32 = 0xFFFFFFFF

_SUBREG = {
    # name -> (full register, shift, width in bytes)
    **{r: (r, 0, 4) for r in GPRS},
    "ax": ("eax", 0, 2), "bx": ("ebx", 0, 2), "cx": ("ecx", 0, 2), "dx": ("edx", 0, 2),
    "si": ("esi", 0, 2), "di": ("edi", 0, 2), "bp": ("ebp", 0, 2), "sp": ("esp", 0, 2),
    "al": ("eax", 0, 1), "bl": ("ebx", 0, 1), "cl": ("ecx", 0, 1), "dl": ("edx", 0, 1),
    "ah": ("eax", 8, 1), "bh": ("ebx", 8, 1), "ch": ("ecx", 8, 1), "dh": ("edx", 8, 1),
}

_JCC = {
    "je": lambda f: f.zf, "jz": lambda f: f.zf,
    "jne": lambda f: not f.zf, "jnz": lambda f: not f.zf,
    "jb": lambda f: f.cf, "jc": lambda f: f.cf, "jnae": lambda f: f.cf,
    "jae": lambda f: not f.cf, "jnb": lambda f: not f.cf, "jnc": lambda f: not f.cf,
    "jbe": lambda f: f.cf or f.zf, "jna": lambda f: f.cf or f.zf,
    "ja": lambda f: not (f.cf or f.zf), "jnbe": lambda f: not (f.cf or f.zf),
    "jl": lambda f: f.sf != f.of, "jnge": lambda f: f.sf != f.of,
    "jge": lambda f: f.sf == f.of, "jnl": lambda f: f.sf == f.of,
    "jle": lambda f: f.zf or f.sf != f.of, "jng": lambda f: f.zf or f.sf != f.of,
    "jg": lambda f: not f.zf and f.sf == f.of, "jnle": lambda f: not f.zf and f.sf == f.of,
    "js": lambda f: f.sf, "jns": lambda f: not f.sf,
    "jo": lambda f: f.of, "jno": lambda f: not f.of,
}


def _mask(size: int) -> int:
    return (1 << (8 * size)) - 1


def _sign(value: int, size: int) -> int:
    bits = 8 * size
    value &= _mask(size)
    return value - (1 << bits) if value >> (bits - 1) else value


@dataclass
class Flags:
    zf: bool = False
    sf: bool = False
    cf: bool = False
    of: bool = False

    def logic(self, result: int, size: int):
        result &= _mask(size)
        self.zf = result == 0
        self.sf = bool(result >> (8 * size - 1))
        self.cf = self.of = False


@dataclass
class EmulationOutcome:
    steps: int
    budget_exceeded: bool
    halted_at: int | None
    reason: str


@dataclass
class Emulator:
    image: BinaryImage
    regs: dict[str, int] = field(default_factory=lambda: {r: 0 for r in GPRS})
    flags: Flags = field(default_factory=Flags)
    # address -> byte value for every byte written during the run
    memory: dict[int, int] = field(default_factory=dict)
    # address -> (step, instruction address) of the last write
    writes: dict[int, tuple[int, int]] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.regs["esp"] = STACK_TOP
        self.regs["ebp"] = STACK_TOP

    # registers ---------------------------------------------------------
    def get_reg(self, name: str) -> int:
        full, shift, width = _SUBREG[name]
        return (self.regs[full] >> shift) & _mask(width)

    def set_reg(self, name: str, value: int):
        full, shift, width = _SUBREG[name]
        m = _mask(width) << shift
        self.regs[full] = (self.regs[full] & ~m & MASK32) | ((value << shift) & m)

    # memory ------------------------------------------------------------
    def read_byte(self, addr: int) -> int:
        addr &= MASK32
        if addr in self.memory:
            return self.memory[addr]
        b = self.image.byte_at(addr)
        return 0 if b is None else b

    def read(self, addr: int, size: int) -> int:
        return int.from_bytes(bytes(self.read_byte(addr + i) for i in range(size)), "little")

    def write(self, addr: int, value: int, size: int, pc: int):
        for i, b in enumerate((value & _mask(size)).to_bytes(size, "little")):
            a = (addr + i) & MASK32
            self.memory[a] = b
            self.writes[a] = (self.step, pc)

    def memory_image(self) -> dict[int, int]:
        return dict(sorted(self.memory.items()))

    # operands ----------------------------------------------------------
    def address_of(self, op: Operand) -> int:
        addr = op.displacement
        if op.base:
            addr += self.get_reg(op.base) if op.base in _SUBREG else 0
        if op.index:
            addr += (self.get_reg(op.index) if op.index in _SUBREG else 0) * op.scale
        return addr & MASK32

    def load(self, op: Operand) -> int:
        if op.kind == "imm":
            return op.immediate & _mask(op.size or 4)
        if op.kind == "reg":
            return self.get_reg(op.register) if op.register in _SUBREG else 0
        if op.segment in ("fs", "gs"):
            return 0
        return self.read(self.address_of(op), op.size)

    def store(self, op: Operand, value: int, pc: int):
        if op.kind == "reg":
            if op.register in _SUBREG:
                self.set_reg(op.register, value)
        elif op.kind == "mem" and op.segment not in ("fs", "gs"):
            self.write(self.address_of(op), value, op.size, pc)

    def push(self, value: int, pc: int):
        self.regs["esp"] = (self.regs["esp"] - 4) & MASK32
        self.write(self.regs["esp"], value, 4, pc)

    def pop(self) -> int:
        value = self.read(self.regs["esp"], 4)
        self.regs["esp"] = (self.regs["esp"] + 4) & MASK32
        return value

    # execution ---------------------------------------------------------
    def execute(self, insn: Instruction) -> int | None:
        """Run one instruction; return the next pc, or None to halt."""
        m, ops, pc, nxt = insn.mnemonic, insn.operands, insn.address, insn.next_address

        if m in ("ret", "retn", "retf", "iret", "iretd", "hlt"):
            return None
        if m == "nop":
            return nxt
        if m == "call":
            self.regs["eax"] = 0
            return nxt
        if m == "jmp":
            return insn.branch_target
        if m in _JCC:
            return insn.branch_target if _JCC[m](self.flags) else nxt
        if m in ("loop", "loope", "loopne"):
            self.regs["ecx"] = (self.regs["ecx"] - 1) & MASK32
            taken = self.regs["ecx"] != 0
            if m == "loope":
                taken = taken and self.flags.zf
            elif m == "loopne":
                taken = taken and not self.flags.zf
            return insn.branch_target if taken else nxt
        if m == "jecxz":
            return insn.branch_target if self.regs["ecx"] == 0 else nxt

        if m == "mov":
            self.store(ops[0], self.load(ops[1]), pc)
        elif m == "movzx":
            self.store(ops[0], self.load(ops[1]), pc)
        elif m == "movsx":
            self.store(ops[0], _sign(self.load(ops[1]), ops[1].size) & _mask(ops[0].size), pc)
        elif m == "lea":
            self.store(ops[0], self.address_of(ops[1]), pc)
        elif m == "push":
            value = self.load(ops[0])
            if ops[0].kind == "imm":
                value = _sign(value, ops[0].size or 4) & MASK32
            self.push(value, pc)
        elif m == "pop":
            self.store(ops[0], self.pop(), pc)
        elif m == "leave":
            self.regs["esp"] = self.regs["ebp"]
            self.regs["ebp"] = self.pop()
        elif m in ("add", "sub", "cmp"):
            self._addsub(m, ops, pc)
        elif m in ("xor", "or", "and", "test"):
            size = ops[0].size
            a, b = self.load(ops[0]), self.load(ops[1])
            r = a ^ b if m == "xor" else a | b if m == "or" else a & b
            self.flags.logic(r, size)
            if m != "test":
                self.store(ops[0], r, pc)
        elif m in ("inc", "dec"):
            size = ops[0].size
            a = self.load(ops[0])
            r = (a + 1 if m == "inc" else a - 1) & _mask(size)
            sa, sr = _sign(a, size), _sign(r, size)
            self.flags.zf = r == 0
            self.flags.sf = sr < 0
            self.flags.of = (m == "inc" and sa >= 0 > sr) or (m == "dec" and sa < 0 <= sr)
            self.store(ops[0], r, pc)
        elif m in ("not", "neg"):
            size = ops[0].size
            a = self.load(ops[0])
            r = (~a if m == "not" else -a) & _mask(size)
            if m == "neg":
                self.flags.logic(r, size)
                self.flags.cf = a != 0
            self.store(ops[0], r, pc)
        elif m in ("shl", "sal", "shr", "sar", "rol", "ror"):
            self._shift(m, ops, pc)
        else:
            self._clobber(insn)
        return nxt

    def _addsub(self, m, ops, pc):
        size = ops[0].size
        a, b = self.load(ops[0]), self.load(ops[1]) & _mask(size)
        full = a + b if m == "add" else a - b
        r = full & _mask(size)
        self.flags.zf = r == 0
        self.flags.sf = bool(r >> (8 * size - 1))
        if m == "add":
            self.flags.cf = full > _mask(size)
            self.flags.of = _sign(a, size) + _sign(b, size) != _sign(r, size)
        else:
            self.flags.cf = a < b
            self.flags.of = _sign(a, size) - _sign(b, size) != _sign(r, size)
        if m != "cmp":
            self.store(ops[0], r, pc)

    def _shift(self, m, ops, pc):
        size = ops[0].size
        bits = 8 * size
        a = self.load(ops[0])
        count = (self.load(ops[1]) if len(ops) > 1 else 1) & 0x1F
        if count == 0:
            return
        if m in ("shl", "sal"):
            r = (a << count) & _mask(size)
            self.flags.cf = bool((a >> (bits - count)) & 1) if count <= bits else False
        elif m == "shr":
            r = a >> count
            self.flags.cf = bool((a >> (count - 1)) & 1)
        elif m == "sar":
            r = (_sign(a, size) >> count) & _mask(size)
            self.flags.cf = bool((_sign(a, size) >> (count - 1)) & 1)
        else:
            c = count % bits
            if m == "rol":
                r = ((a << c) | (a >> (bits - c))) & _mask(size) if c else a
                self.flags.cf = bool(r & 1)
            else:
                r = ((a >> c) | (a << (bits - c))) & _mask(size) if c else a
                self.flags.cf = bool(r >> (bits - 1))
            self.store(ops[0], r, pc)
            return
        self.flags.zf = r == 0
        self.flags.sf = bool(r >> (bits - 1))
        self.store(ops[0], r, pc)

    def _clobber(self, insn: Instruction):
        # unmodelled: destination and written GPRs read as 0 from now on
        if insn.operands and insn.operands[0].kind in ("reg", "mem"):
            dst = insn.operands[0]
            if not (dst.kind == "reg" and canonical_register(dst.register) == "esp"):
                self.store(dst, 0, insn.address)
        for reg in insn.regs_written:
            if reg in GPRS and reg != "esp":
                self.regs[reg] = 0


def run_function(emu: Emulator, cfg: ControlFlowGraph, max_steps: int) -> EmulationOutcome:
    """Execute ``cfg`` from its entry until ret, an exit from the function, or the step cap."""
    pc = cfg.function_entry
    while True:
        if emu.step >= max_steps:
            return EmulationOutcome(emu.step, True, pc, "step cap")
        insn = cfg.instruction_at(pc) if pc is not None else None
        if insn is None:
            return EmulationOutcome(emu.step, False, pc, "left function")
        nxt = emu.execute(insn)
        emu.step += 1
        if nxt is None:
            return EmulationOutcome(emu.step, False, insn.address, "ret")
        pc = nxt
