"""Loading of x86 PE images and desk-scale fixture manifests.

Both paths produce a :class:`BinaryImage`, an immutable view of the mapped
sections, the import address table and the entry point.  The module also
hosts the import-count packing heuristic.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import pefile

__all__ = [
    "LoaderError",
    "NotPE",
    "CorruptHeader",
    "UnsupportedArch",
    "MalformedManifest",
    "FormatKind",
    "Section",
    "ImportEntry",
    "ImportTable",
    "BinaryImage",
    "PackingVerdict",
    "PackingAssessment",
    "PackerHeuristicConfig",
    "parse_pe",
    "load_fixture",
    "parse_manifest",
    "render_manifest",
    "load_path",
    "detect_packing",
]

IMAGE_FILE_MACHINE_I386 = 0x14C
OPTIONAL_HDR32_MAGIC = 0x10B

SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000


class LoaderError(Exception):
    """Base class for everything that stops an image from loading."""


class NotPE(LoaderError):
    pass


class CorruptHeader(LoaderError):
    pass


class UnsupportedArch(LoaderError):
    pass


class MalformedManifest(LoaderError):
    pass


class FormatKind(enum.Enum):
    PE32 = "PE32"
    RAW_FIXTURE = "RawFixture"


@dataclass(frozen=True)
class Section:
    name: str
    virtual_address: int
    size: int
    flags: frozenset[str]
    data: bytes = field(repr=False)
    file_offset: int | None = None
    raw_size: int = 0

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"section {self.name!r} has no size")
        if len(self.name) > 8:
            raise ValueError(f"section name {self.name!r} longer than 8 bytes")
        if len(self.data) != self.size:
            raise ValueError("section data must cover the whole virtual size")

    @property
    def end(self) -> int:
        return self.virtual_address + self.size

    @property
    def executable(self) -> bool:
        return "executable" in self.flags

    def contains(self, va: int) -> bool:
        return self.virtual_address <= va < self.end


@dataclass(frozen=True)
class ImportEntry:
    library: str
    symbol: str | None
    iat_slot: int
    ordinal: int | None = None

    def __post_init__(self):
        if not self.library:
            raise ValueError("import without a library name")
        if not self.symbol and self.ordinal is None:
            raise ValueError(f"import from {self.library} has neither name nor ordinal")

    @property
    def name(self) -> str:
        return self.symbol if self.symbol else f"Ordinal_{self.ordinal}"


@dataclass(frozen=True)
class ImportTable:
    entries: tuple[ImportEntry, ...] = ()

    def __post_init__(self):
        slots = [e.iat_slot for e in self.entries]
        if len(set(slots)) != len(slots):
            raise ValueError("duplicate IAT slot in import table")
        object.__setattr__(self, "_by_slot", {e.iat_slot: e for e in self.entries})

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def at_slot(self, va: int) -> ImportEntry | None:
        return self._by_slot.get(va)

    @property
    def libraries(self) -> set[str]:
        return {e.library.casefold() for e in self.entries}

    @property
    def library_count(self) -> int:
        return len(self.libraries)

    @property
    def function_count(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class BinaryImage:
    format_kind: FormatKind
    sections: tuple[Section, ...]
    imports: ImportTable
    entry_point: int
    image_base: int

    def __post_init__(self):
        ordered = sorted(self.sections, key=lambda s: s.virtual_address)
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.virtual_address < prev.end:
                raise CorruptHeader(f"sections {prev.name!r} and {cur.name!r} overlap")
        object.__setattr__(self, "sections", tuple(ordered))
        if self.format_kind is FormatKind.PE32:
            sec = self.section_at(self.entry_point)
            if sec is None or not sec.executable:
                raise CorruptHeader(f"entry point {self.entry_point:#x} is not in an executable section")

    def section_at(self, va: int) -> Section | None:
        for sec in self.sections:
            if sec.contains(va):
                return sec
        return None

    def executable_sections(self) -> list[Section]:
        return [s for s in self.sections if s.executable]

    def is_mapped(self, va: int) -> bool:
        return self.section_at(va) is not None

    def byte_at(self, va: int) -> int | None:
        sec = self.section_at(va)
        if sec is None:
            return None
        return sec.data[va - sec.virtual_address]

    def read(self, va: int, size: int) -> bytes | None:
        """Bytes at ``va``, or None unless the whole range lies in one section."""
        sec = self.section_at(va)
        if sec is None or va + size > sec.end:
            return None
        off = va - sec.virtual_address
        return sec.data[off:off + size]

    def read_until_end(self, va: int, limit: int) -> bytes:
        """Up to ``limit`` bytes from ``va`` without crossing the section end."""
        sec = self.section_at(va)
        if sec is None:
            return b""
        off = va - sec.virtual_address
        return sec.data[off:off + limit]

    def read_u32(self, va: int) -> int | None:
        raw = self.read(va, 4)
        return None if raw is None else struct.unpack("<I", raw)[0]


# --------------------------------------------------------------------------
# PE32

def _section_flags(characteristics: int) -> frozenset[str]:
    flags = set()
    if characteristics & (SCN_MEM_EXECUTE | SCN_CNT_CODE):
        flags.add("executable")
    if characteristics & SCN_MEM_READ:
        flags.add("readable")
    if characteristics & SCN_MEM_WRITE:
        flags.add("writable")
    if characteristics & SCN_CNT_INITIALIZED_DATA:
        flags.add("initialized-data")
    return frozenset(flags)


def parse_pe(data: bytes) -> BinaryImage:
    """Parse a 32-bit x86 PE file held in memory."""
    if not data:
        raise NotPE("empty input")
    if data[:2] != b"MZ":
        raise NotPE("missing MZ magic")
    if len(data) < 0x40:
        raise CorruptHeader("truncated DOS header")
    (e_lfanew,) = struct.unpack_from("<I", data, 0x3C)
    if e_lfanew + 24 > len(data):
        raise CorruptHeader(f"e_lfanew {e_lfanew:#x} points past end of file")
    if data[e_lfanew:e_lfanew + 4] != b"PE\0\0":
        raise NotPE("missing PE signature")

    try:
        pe = pefile.PE(data=bytes(data), fast_load=True)
    except pefile.PEFormatError as exc:
        raise CorruptHeader(str(exc)) from exc

    if pe.FILE_HEADER.Machine != IMAGE_FILE_MACHINE_I386 or pe.OPTIONAL_HEADER.Magic != OPTIONAL_HDR32_MAGIC:
        raise UnsupportedArch(
            f"machine {pe.FILE_HEADER.Machine:#x} / optional header {pe.OPTIONAL_HEADER.Magic:#x}; only x86-32 is supported"
        )

    image_base = pe.OPTIONAL_HEADER.ImageBase
    sections = []
    for s in pe.sections:
        name = s.Name.rstrip(b"\0").decode("latin-1")
        raw_off, raw_size = s.PointerToRawData, s.SizeOfRawData
        if raw_size and raw_off + raw_size > len(data):
            raise CorruptHeader(f"section {name!r} extends past end of file")
        size = s.Misc_VirtualSize or raw_size
        if size == 0:
            continue
        raw = data[raw_off:raw_off + min(raw_size, size)] if raw_size else b""
        sections.append(Section(
            name=name,
            virtual_address=image_base + s.VirtualAddress,
            size=size,
            flags=_section_flags(s.Characteristics),
            data=raw + bytes(size - len(raw)),
            file_offset=raw_off if raw_size else None,
            raw_size=len(raw),
        ))

    try:
        pe.parse_data_directories(directories=[pefile.DIRECTORY_ENTRY["IMAGE_DIRECTORY_ENTRY_IMPORT"]])
    except pefile.PEFormatError as exc:
        raise CorruptHeader(f"import directory: {exc}") from exc
    entries, seen = [], set()
    for desc in getattr(pe, "DIRECTORY_ENTRY_IMPORT", []):
        lib = desc.dll.decode("latin-1") if desc.dll else ""
        for imp in desc.imports:
            if not lib or imp.address in seen:
                continue
            symbol = imp.name.decode("latin-1") if imp.name else None
            if not symbol and imp.ordinal is None:
                continue
            seen.add(imp.address)
            entries.append(ImportEntry(lib, symbol, imp.address, imp.ordinal))

    return BinaryImage(
        format_kind=FormatKind.PE32,
        sections=tuple(sections),
        imports=ImportTable(tuple(entries)),
        entry_point=image_base + pe.OPTIONAL_HEADER.AddressOfEntryPoint,
        image_base=image_base,
    )


# --------------------------------------------------------------------------
# Fixture manifests
#
# Line oriented, ``key = value``; '#' starts a comment.  Keys:
#   base = <addr>                      load address of the code section (required)
#   entry = <addr>                     entry point (default: base)
#   code_hex = <hex>                   code bytes, repeatable, concatenated in order
#   data = <addr> <hex>                extra readable data section, repeatable
#   import = <library> <symbol> <slot> IAT entry, repeatable
#   section_name = <name>              name of the code section (default .text)

def _int(text: str, what: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise MalformedManifest(f"bad {what}: {text!r}") from None


def _hex(text: str, what: str) -> bytes:
    try:
        return bytes.fromhex("".join(text.split()))
    except ValueError:
        raise MalformedManifest(f"bad hex in {what}") from None


def parse_manifest(text: str) -> dict:
    """Parse manifest text into a plain dict (the shape :func:`load_fixture` takes)."""
    out: dict = {"code_hex": "", "data": [], "imports": []}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedManifest(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key == "code_hex":
            out["code_hex"] += "".join(value.split())
        elif key == "data":
            addr, _, blob = value.partition(" ")
            out["data"].append({"address": addr, "hex": blob})
        elif key == "import":
            parts = value.split()
            if len(parts) != 3:
                raise MalformedManifest(f"line {lineno}: import needs library, symbol and slot")
            out["imports"].append({"library": parts[0], "symbol": parts[1], "slot": parts[2]})
        elif key in ("base", "entry", "section_name"):
            out[key] = value
        else:
            raise MalformedManifest(f"line {lineno}: unknown key {key!r}")
    return out


def render_manifest(manifest: Mapping) -> str:
    """Inverse of :func:`parse_manifest` for dict manifests."""
    lines = [f"base = {manifest['base']}"]
    if "entry" in manifest:
        lines.append(f"entry = {manifest['entry']}")
    if "section_name" in manifest:
        lines.append(f"section_name = {manifest['section_name']}")
    code = manifest["code_hex"]
    for i in range(0, len(code), 64):
        lines.append(f"code_hex = {code[i:i + 64]}")
    for d in manifest.get("data", []):
        lines.append(f"data = {d['address']} {d['hex']}")
    for imp in manifest.get("imports", []):
        lines.append(f"import = {imp['library']} {imp['symbol']} {imp['slot']}")
    return "\n".join(lines) + "\n"


def load_fixture(manifest: Mapping | str) -> BinaryImage:
    """Build a RawFixture image from a manifest dict or manifest text."""
    if isinstance(manifest, str):
        manifest = parse_manifest(manifest)
    if not manifest.get("code_hex"):
        raise MalformedManifest("manifest declares no code bytes")
    if "base" not in manifest:
        raise MalformedManifest("manifest declares no base address")

    def as_int(v, what):
        return v if isinstance(v, int) else _int(str(v), what)

    base = as_int(manifest["base"], "base")
    code = manifest["code_hex"]
    code = code if isinstance(code, (bytes, bytearray)) else _hex(code, "code_hex")
    if not code:
        raise MalformedManifest("manifest declares no code bytes")
    entry = as_int(manifest.get("entry", base), "entry")
    name = manifest.get("section_name", ".text")
    if not 0 < len(name) <= 8:
        raise MalformedManifest(f"bad section name {name!r}")

    sections = [Section(name, base, len(code), frozenset({"executable", "readable"}), bytes(code))]
    for i, d in enumerate(manifest.get("data", [])):
        addr = as_int(d["address"], "data address")
        blob = d["hex"]
        blob = blob if isinstance(blob, (bytes, bytearray)) else _hex(blob, "data")
        if not blob:
            raise MalformedManifest(f"empty data section at {addr:#x}")
        sec_name = ".data" if i == 0 else f".data{i}"
        sections.append(Section(sec_name, addr, len(blob),
                                frozenset({"readable", "writable", "initialized-data"}), bytes(blob)))

    entries, slots = [], set()
    for imp in manifest.get("imports", []):
        slot = as_int(imp["slot"], "import slot")
        if slot in slots:
            raise MalformedManifest(f"IAT slot {slot:#x} declared twice")
        slots.add(slot)
        if not imp.get("library") or not imp.get("symbol"):
            raise MalformedManifest("import needs a library and a symbol")
        entries.append(ImportEntry(imp["library"], imp["symbol"], slot))

    if not base <= entry < base + len(code):
        raise MalformedManifest(f"entry {entry:#x} outside the code bytes")
    try:
        return BinaryImage(FormatKind.RAW_FIXTURE, tuple(sections), ImportTable(tuple(entries)), entry, base)
    except CorruptHeader as exc:
        raise MalformedManifest(str(exc)) from exc


def load_path(path: str | Path, fixture: bool | None = None) -> BinaryImage:
    """Load a file; fixture manifests are recognised by flag or ``.fixture`` suffix."""
    path = Path(path)
    if fixture is None:
        fixture = path.suffix == ".fixture"
    if fixture:
        return load_fixture(path.read_text())
    return parse_pe(path.read_bytes())


# --------------------------------------------------------------------------
# Packing heuristic

class PackingVerdict(enum.Enum):
    NOT_PACKED = "NotPacked"
    HEURISTIC_PACKED = "HeuristicPacked"
    KNOWN_PACKER = "KnownPacker"


@dataclass(frozen=True)
class PackingAssessment:
    verdict: PackingVerdict
    packer_name: str | None
    library_count: int
    function_count: int

    def __post_init__(self):
        if (self.packer_name is not None) != (self.verdict is PackingVerdict.KNOWN_PACKER):
            raise ValueError("packer_name is set exactly for KnownPacker verdicts")

    @property
    def packed(self) -> bool:
        return self.verdict is not PackingVerdict.NOT_PACKED


DEFAULT_PACKER_SECTIONS = {
    "UPX0": "UPX",
    "UPX1": "UPX",
    ".aspack": "ASPack",
    ".themida": "Themida",
}


@dataclass(frozen=True)
class PackerHeuristicConfig:
    min_libraries: int = 5
    min_functions: int = 15
    # section name -> packer name
    known_packer_sections: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_PACKER_SECTIONS))

    def __post_init__(self):
        if self.min_libraries < 1 or self.min_functions < 1:
            raise ValueError("packing thresholds must be >= 1")


def detect_packing(image: BinaryImage, config: PackerHeuristicConfig | None = None) -> PackingAssessment:
    """Known-packer section names first, then the import-count heuristic.

    Libraries are counted case-insensitively; functions are IAT entries.
    Both comparisons are strict "fewer than".
    """
    config = config or PackerHeuristicConfig()
    libs = image.imports.library_count
    funcs = image.imports.function_count
    known = {k.casefold(): v for k, v in config.known_packer_sections.items()}
    for sec in image.sections:
        packer = known.get(sec.name.casefold())
        if packer:
            return PackingAssessment(PackingVerdict.KNOWN_PACKER, packer, libs, funcs)
    if libs < config.min_libraries or funcs < config.min_functions:
        return PackingAssessment(PackingVerdict.HEURISTIC_PACKED, None, libs, funcs)
    return PackingAssessment(PackingVerdict.NOT_PACKED, None, libs, funcs)

