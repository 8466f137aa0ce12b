"""API call features: name resolution through the IAT, stdcall argument
recovery and ``Called API: Name(args)`` rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, NamedTuple

from ..disasm import (
    ControlFlowGraph,
    DecodeError,
    Decoder,
    Instruction,
    LoadFrom,
    Unknown,
    UNKNOWN,
    default_decoder,
    trace_register_back,
)
from ..loader import BinaryImage
from . import Feature, FeatureKind, quote
from .strings import Encoding, read_string

__all__ = [
    "ApiSignature",
    "ApiKnowledgeBase",
    "Immediate",
    "StringPtr",
    "ArgValue",
    "ResolvedCall",
    "RecoveredArgs",
    "parse_signatures",
    "resolve_direct_call",
    "resolve_indirect_call",
    "resolve_call",
    "recover_arguments",
    "render_arg",
    "render_api_feature",
    "api_features",
]

MAX_OBSERVED_PUSHES = 16
HEX_ABOVE = 4095

_WIDTHS = {"ansi": Encoding.ASCII, "wide": Encoding.UTF16LE}


@dataclass(frozen=True)
class ApiSignature:
    name: str
    library: str
    arg_count: int
    string_args: Mapping[int, Encoding] = field(default_factory=dict)

    def __post_init__(self):
        if any(not 0 <= i < self.arg_count for i in self.string_args):
            raise ValueError(f"{self.name}: string argument index out of range")


def parse_signatures(text: str, source: str = "<text>") -> list[ApiSignature]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{source}:{lineno}: expected 4 fields, got {len(parts)}")
        name, lib, count, strs = parts
        string_args = {}
        if strs != "-":
            for item in strs.split(","):
                idx, _, width = item.partition(":")
                if width not in _WIDTHS:
                    raise ValueError(f"{source}:{lineno}: unknown string width {width!r}")
                string_args[int(idx)] = _WIDTHS[width]
        out.append(ApiSignature(name, lib, int(count), string_args))
    return out


class ApiKnowledgeBase:
    """Name -> signature map; later sources override earlier ones."""

    def __init__(self, signatures=()):
        self.signatures: dict[str, ApiSignature] = {}
        for sig in signatures:
            self.signatures[sig.name] = sig

    @classmethod
    def builtin(cls) -> "ApiKnowledgeBase":
        text = resources.files("tadaspot.data").joinpath("api_signatures.txt").read_text()
        return cls(parse_signatures(text, "api_signatures.txt"))

    @classmethod
    def load(cls, *paths: str | Path) -> "ApiKnowledgeBase":
        kb = cls.builtin()
        for path in paths:
            kb.merge(parse_signatures(Path(path).read_text(), str(path)))
        return kb

    def merge(self, signatures) -> None:
        for sig in signatures:
            self.signatures[sig.name] = sig

    def get(self, name: str) -> ApiSignature | None:
        return self.signatures.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self.signatures

    def __len__(self) -> int:
        return len(self.signatures)


@dataclass(frozen=True)
class Immediate:
    value: int


@dataclass(frozen=True)
class StringPtr:
    text: str


ArgValue = Immediate | StringPtr | Unknown


@dataclass(frozen=True)
class ResolvedCall:
    site: int
    api: str
    args: tuple[ArgValue, ...]
    block_id: tuple[int, int]
    insufficient_pushes: bool = False


# --------------------------------------------------------------------------
# Name resolution

def _slot_name(image: BinaryImage, va: int) -> str | None:
    entry = image.imports.at_slot(va & 0xFFFFFFFF)
    return entry.name if entry else None


def resolve_direct_call(insn: Instruction, image: BinaryImage, decoder: Decoder | None = None) -> str | None:
    """Import called by ``call [slot]``, ``call slot`` or ``call thunk`` (``jmp [slot]``)."""
    if not insn.is_call or not insn.operands:
        return None
    op = insn.operands[0]
    if op.kind == "mem" and op.is_absolute and op.segment in (None, "ds"):
        return _slot_name(image, op.displacement)
    if op.kind != "imm":
        return None
    target = op.immediate
    name = _slot_name(image, target)
    if name:
        return name
    sec = image.section_at(target)
    if sec is None or not sec.executable:
        return None
    try:
        thunk = (decoder or default_decoder()).decode(image.read_until_end(target, 15), target)
    except DecodeError:
        return None
    if thunk.is_jump and thunk.operands and thunk.operands[0].is_absolute:
        return _slot_name(image, thunk.operands[0].displacement)
    return None


def resolve_indirect_call(insn: Instruction, cfg: ControlFlowGraph, image: BinaryImage) -> str | None:
    """Import reached by ``call reg`` when the register provably holds an IAT load."""
    if not insn.is_call or not insn.operands or insn.operands[0].kind != "reg":
        return None
    value = trace_register_back(cfg, insn.address, insn.operands[0].register)
    if isinstance(value, LoadFrom):
        return _slot_name(image, value.address)
    return None


def resolve_call(insn: Instruction, cfg: ControlFlowGraph, image: BinaryImage, decoder: Decoder | None = None) -> str | None:
    return resolve_direct_call(insn, image, decoder) or resolve_indirect_call(insn, cfg, image)


# --------------------------------------------------------------------------
# Arguments

class RecoveredArgs(NamedTuple):
    args: list[ArgValue]
    insufficient_pushes: bool


def _push_window(cfg: ControlFlowGraph, site: int):
    """Instructions before ``site``, nearest first, through at most one predecessor."""
    block = cfg.block_containing(site)
    idx = block.addresses.index(site)
    yield from reversed(block.instructions[:idx])
    preds = cfg.predecessors(block.start)
    if len(preds) == 1:
        pred = cfg.blocks[preds[0]]
        if not pred.last.is_call and pred.start != block.start:
            yield from reversed(pred.instructions)


def _arg_value(op, image: BinaryImage, width: Encoding | None, guess_strings: bool) -> ArgValue:
    if op.kind != "imm":
        return UNKNOWN
    value = op.immediate & 0xFFFFFFFF
    if width is not None:
        found = read_string(image, value, 1, width)
        if found:
            return StringPtr(found[0])
    elif guess_strings:
        found = read_string(image, value, 4)
        if found:
            return StringPtr(found[0])
    return Immediate(value)


def recover_arguments(cfg: ControlFlowGraph, site: int, signature: ApiSignature | None, image: BinaryImage) -> RecoveredArgs:
    """stdcall arguments of the call at ``site``, leftmost first.

    The nearest push is argument 0.  Collection stops at an earlier call,
    at a merge point, or once ``arg_count`` pushes are found.  Without a
    signature every push in reach is taken.
    """
    wanted = signature.arg_count if signature else MAX_OBSERVED_PUSHES
    pushes = []
    for insn in _push_window(cfg, site):
        if len(pushes) >= wanted or insn.is_call:
            break
        if insn.mnemonic == "push" and insn.operands:
            pushes.append(insn.operands[0])
    args = []
    for i, op in enumerate(pushes):
        width = signature.string_args.get(i) if signature else None
        args.append(_arg_value(op, image, width, guess_strings=signature is None))
    return RecoveredArgs(args, signature is not None and len(args) < wanted)


# --------------------------------------------------------------------------
# Rendering

def render_arg(arg: ArgValue) -> str:
    if isinstance(arg, StringPtr):
        return quote(arg.text)
    if isinstance(arg, Immediate):
        return str(arg.value) if arg.value <= HEX_ABOVE else f"0x{arg.value:X}"
    return "<unknown>"


def render_api_feature(call: ResolvedCall) -> Feature:
    args = ", ".join(render_arg(a) for a in call.args)
    return Feature(FeatureKind.API_CALL, f"Called API: {call.api}({args})", call.block_id, call.site)


def api_features(
    cfg: ControlFlowGraph,
    image: BinaryImage,
    kb: ApiKnowledgeBase | None = None,
    decoder: Decoder | None = None,
) -> dict[int, list[Feature]]:
    """``Called API`` features for every resolvable call, keyed by block start."""
    kb = kb or ApiKnowledgeBase.builtin()
    out: dict[int, list[Feature]] = {}
    for block in cfg:
        feats = []
        for insn in block.instructions:
            if not insn.is_call:
                continue
            name = resolve_call(insn, cfg, image, decoder)
            if name is None:
                continue
            sig = kb.get(name)
            args, short = recover_arguments(cfg, insn.address, sig, image)
            if sig is not None and short:
                args = args + [UNKNOWN] * (sig.arg_count - len(args))
            call = ResolvedCall(insn.address, name, tuple(args), block.id, short)
            feats.append(render_api_feature(call))
        out[block.start] = feats
    return out
