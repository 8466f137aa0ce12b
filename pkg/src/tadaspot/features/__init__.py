"""Per-block evidence lines fed into the rating prompt."""

from __future__ import annotations

import enum
from dataclasses import dataclass

__all__ = ["FeatureKind", "Feature", "PREFIXES", "quote"]


class FeatureKind(enum.Enum):
    UNCOMMON_INS = "UncommonIns"
    SEGMENT_ACCESS = "SegmentAccess"
    STRING_REF = "StringRef"
    API_CALL = "ApiCall"


PREFIXES = {
    FeatureKind.UNCOMMON_INS: "Uncommon INS: ",
    FeatureKind.SEGMENT_ACCESS: "Segment Register Access: ",
    FeatureKind.STRING_REF: "String Reference: ",
    FeatureKind.API_CALL: "Called API: ",
}

# prompt order: assembly, strings, APIs
KIND_ORDER = {
    FeatureKind.UNCOMMON_INS: 0,
    FeatureKind.SEGMENT_ACCESS: 0,
    FeatureKind.STRING_REF: 1,
    FeatureKind.API_CALL: 2,
}


@dataclass(frozen=True)
class Feature:
    kind: FeatureKind
    text: str
    block_id: tuple[int, int]
    source_address: int

    def __post_init__(self):
        if not self.text.startswith(PREFIXES[self.kind]) or self.text == PREFIXES[self.kind]:
            raise ValueError(f"feature text {self.text!r} does not fit kind {self.kind.value}")

    @property
    def sort_key(self) -> tuple[int, int]:
        return (KIND_ORDER[self.kind], self.source_address)


def quote(text: str) -> str:
    return '"' + text.replace('"', '\\"') + '"'


def hex_h(value: int) -> str:
    """Uppercase hex with an ``h`` suffix: 0x30 -> '30h', 0xc -> 'Ch'."""
    return f"{value:X}h"
