"""End-to-end pipeline, breakpoint reports and corpus evaluation."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .disasm import EntryOutOfRange, discover_functions, function_cfg
from .features.api import ApiKnowledgeBase, api_features
from .features.asm import DEFAULT_TABLE, AugmentationTable, asm_features
from .features.strings import EmulationTriggerConfig, string_features
from .loader import (
    BinaryImage,
    FormatKind,
    LoaderError,
    PackerHeuristicConfig,
    PackingAssessment,
    detect_packing,
    load_fixture,
    parse_pe,
)
from .rating import (
    LocalRuleBackend,
    RatingBackend,
    RatingCache,
    RatingConfig,
    RatingError,
    build_prompt,
    rate_all,
)

log = logging.getLogger(__name__)

__all__ = [
    "REPORT_SCHEMA",
    "REPORT_SCHEMA_VERSION",
    "AnalysisConfig",
    "BlockRecord",
    "Report",
    "analyze",
    "analyze_image",
    "emit_report",
    "Tactic",
    "ImplementationKind",
    "Implementation",
    "Sample",
    "ManifestError",
    "parse_ground_truth",
    "Tally",
    "CorpusStats",
    "CorpusEvaluation",
    "is_detected",
    "aggregate",
    "evaluate_corpus",
]

REPORT_SCHEMA = "tadaspot.report"
REPORT_SCHEMA_VERSION = 1


@dataclass
class AnalysisConfig:
    rating: RatingConfig = field(default_factory=RatingConfig)
    packer: PackerHeuristicConfig = field(default_factory=PackerHeuristicConfig)
    strings: EmulationTriggerConfig = field(default_factory=EmulationTriggerConfig)
    augmentation: AugmentationTable = DEFAULT_TABLE
    knowledge_base: ApiKnowledgeBase | None = None
    backend: RatingBackend | None = None
    cache: RatingCache | None = None
    # "auto": halt on packed PE images only; fixtures carry synthetic import tables
    packing_check: str = "auto"
    fixture: bool | None = None
    dump_prompts: Path | None = None

    def __post_init__(self):
        if self.packing_check not in ("auto", "always", "never"):
            raise ValueError("packing_check must be auto, always or never")


@dataclass(frozen=True)
class BlockRecord:
    block: int
    function: int
    features: tuple[str, ...]
    rating: int
    positive: bool
    prompt_sha256: str
    backend: str


@dataclass(frozen=True)
class Report:
    input_name: str
    input_digest: str
    status: str  # "ok", "packed" or "error"
    format_kind: str | None = None
    packing: PackingAssessment | None = None
    total_blocks: int = 0
    functions: int = 0
    records: tuple[BlockRecord, ...] = ()
    threshold: int = 7
    backend: str | None = None
    decode_errors: int = 0
    error: dict | None = None

    @property
    def positives(self) -> list[int]:
        return sorted({r.block for r in self.records if r.positive})

    @property
    def exit_code(self) -> int:
        if self.status == "ok":
            return 0
        if self.status == "packed":
            return 2
        return 4 if self.error and self.error.get("stage") == "rating" else 3


def _failure(name, digest, stage, exc, **kw) -> Report:
    return Report(name, digest, "error", error={"stage": stage, "type": type(exc).__name__, "message": str(exc)}, **kw)


def analyze(path: str | Path, config: AnalysisConfig | None = None) -> Report:
    """Load ``path`` (PE or fixture manifest) and run the whole pipeline."""
    config = config or AnalysisConfig()
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        return _failure(path.name, "", "load", exc)
    digest = hashlib.sha256(data).hexdigest()
    fixture = config.fixture if config.fixture is not None else path.suffix == ".fixture"
    try:
        image = load_fixture(data.decode("utf-8")) if fixture else parse_pe(data)
    except (LoaderError, UnicodeDecodeError) as exc:
        return _failure(path.name, digest, "load", exc)
    return analyze_image(image, config, path.name, digest)


def _halts_on_packing(image: BinaryImage, config: AnalysisConfig) -> bool:
    if config.packing_check == "never":
        return False
    if config.packing_check == "always":
        return True
    return image.format_kind is FormatKind.PE32


def analyze_image(image: BinaryImage, config: AnalysisConfig | None = None, name: str = "<image>", digest: str = "") -> Report:
    config = config or AnalysisConfig()
    backend = config.backend or LocalRuleBackend()
    kb = config.knowledge_base or ApiKnowledgeBase.builtin()
    common = dict(format_kind=image.format_kind.value, threshold=config.rating.threshold, backend=backend.backend_id)

    packing = detect_packing(image, config.packer)
    if packing.packed and _halts_on_packing(image, config):
        return Report(name, digest, "packed", packing=packing, **common)

    cfgs, decode_errors = [], []
    for entry in discover_functions(image):
        try:
            cfgs.append(function_cfg(image, entry, errors=decode_errors))
        except (EntryOutOfRange, ValueError) as exc:
            log.debug("skipping function %#x: %s", entry, exc)

    prompts, owners, total = [], [], 0
    for cfg in cfgs:
        total += len(cfg)
        strs = string_features(cfg, image, config.strings)
        apis = api_features(cfg, image, kb)
        for block in cfg:
            feats = asm_features(block, config.augmentation) + strs.get(block.start, []) + apis.get(block.start, [])
            if feats:
                prompts.append(build_prompt(feats, block.id))
                owners.append(block)

    if config.dump_prompts is not None:
        out = Path(config.dump_prompts)
        out.mkdir(parents=True, exist_ok=True)
        for p in prompts:
            fn, start = p.block_id
            (out / f"bb_{start:08x}_fn_{fn:08x}.txt").write_text(p.rendered)

    try:
        ratings = rate_all(prompts, backend, config.rating, config.cache)
    except RatingError as exc:
        return _failure(name, digest, "rating", exc, packing=packing, total_blocks=total,
                        functions=len(cfgs), **common)

    records = [
        BlockRecord(block.start, block.function_entry, p.feature_lines, r.rating, r.positive, r.prompt_sha256, r.backend_id)
        for block, p, r in zip(owners, prompts, ratings)
    ]
    records.sort(key=lambda r: (r.block, r.function))
    return Report(name, digest, "ok", packing=packing, total_blocks=total, functions=len(cfgs),
                  records=tuple(records), decode_errors=len(decode_errors), **common)


def _packing_json(p: PackingAssessment | None):
    if p is None:
        return None
    return {"verdict": p.verdict.value, "packer": p.packer_name,
            "libraries": p.library_count, "functions": p.function_count}


def report_dict(report: Report) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "schema_version": REPORT_SCHEMA_VERSION,
        "input": {"name": report.input_name, "sha256": report.input_digest, "format": report.format_kind},
        "status": report.status,
        "error": report.error,
        "packing": _packing_json(report.packing),
        "backend": report.backend,
        "threshold": report.threshold,
        "functions": report.functions,
        "total_blocks": report.total_blocks,
        "decode_errors": report.decode_errors,
        "positives": [f"0x{a:x}" for a in report.positives],
        "records": [
            {
                "block": f"0x{r.block:x}",
                "function": f"0x{r.function:x}",
                "rating": r.rating,
                "positive": r.positive,
                "backend": r.backend,
                "prompt_sha256": r.prompt_sha256,
                "features": list(r.features),
            }
            for r in report.records
        ],
    }


def _text(report: Report) -> str:
    lines = [
        f"input        {report.input_name}",
        f"sha256       {report.input_digest}",
        f"status       {report.status}",
    ]
    if report.error:
        lines.append(f"error        [{report.error['stage']}] {report.error['type']}: {report.error['message']}")
    if report.packing:
        p = report.packing
        extra = f" ({p.packer_name})" if p.packer_name else ""
        lines.append(f"packing      {p.verdict.value}{extra}, {p.library_count} libraries, {p.function_count} imports")
    lines += [
        f"backend      {report.backend}  threshold {report.threshold}",
        f"blocks       {report.total_blocks} in {report.functions} functions, {len(report.records)} with features",
        f"breakpoints  {len(report.positives)}",
        "",
    ]
    if report.records:
        lines.append(f"{'block':<12}{'function':<12}{'rating':>6}  {'':<3}feature")
        for r in report.records:
            mark = "BP" if r.positive else ""
            first, *rest = r.features
            lines.append(f"{r.block:#010x}  {r.function:#010x}  {r.rating:>6}  {mark:<3}{first}")
            lines.extend(f"{'':<36}{f}" for f in rest)
    return "\n".join(lines) + "\n"


def emit_report(report: Report, fmt: str = "json") -> bytes:
    """Serialise a report; JSON output is byte-stable for equal reports."""
    if fmt == "json":
        return (json.dumps(report_dict(report), indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt == "text":
        return _text(report).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


# --------------------------------------------------------------------------
# Ground truth and corpus evaluation
#
# Manifest grammar, one directive per line, '#' comments:
#   sample <path>                      binary or .fixture, relative to the manifest
#   impl <id> <tactic> <kind> <string|nostring> <start>-<end>[,<start>-<end>...]
# ``impl`` lines belong to the preceding sample; ranges are half-open hex
# address ranges.  A sample without impl lines is a benign control.

class Tactic(enum.Enum):
    DEBUGGER_EVASION = "DebuggerEvasion"
    SANDBOX_EVASION = "SandboxEvasion"
    VM_EVASION = "VMEvasion"
    ANALYSIS_TOOL_EVASION = "AnalysisToolEvasion"


class ImplementationKind(enum.Enum):
    ASSEMBLY = "Assembly"
    DIRECT_API = "DirectAPI"
    INDIRECT_API = "IndirectAPI"


class ManifestError(Exception):
    pass


@dataclass(frozen=True)
class Implementation:
    id: str
    tactic: Tactic
    kind: ImplementationKind
    involves_string: bool
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.ranges:
            raise ManifestError(f"{self.id}: no address ranges")
        ordered = sorted(self.ranges)
        for lo, hi in ordered:
            if hi <= lo:
                raise ManifestError(f"{self.id}: empty range {lo:#x}-{hi:#x}")
        for (_, hi), (lo, _) in zip(ordered, ordered[1:]):
            if lo < hi:
                raise ManifestError(f"{self.id}: overlapping ranges")

    def covers(self, address: int) -> bool:
        return any(lo <= address < hi for lo, hi in self.ranges)


@dataclass(frozen=True)
class Sample:
    path: Path
    implementations: tuple[Implementation, ...]


def _parse_impl(parts: list[str], where: str) -> Implementation:
    if len(parts) != 6:
        raise ManifestError(f"{where}: impl needs id, tactic, kind, string flag and ranges")
    _, ident, tactic, kind, flag, spans = parts
    try:
        tactic_ = Tactic(tactic)
        kind_ = ImplementationKind(kind)
    except ValueError as exc:
        raise ManifestError(f"{where}: {exc}") from None
    if flag not in ("string", "nostring"):
        raise ManifestError(f"{where}: string flag must be string or nostring")
    ranges = []
    for span in spans.split(","):
        lo, sep, hi = span.partition("-")
        try:
            ranges.append((int(lo, 16), int(hi, 16)))
        except ValueError:
            raise ManifestError(f"{where}: bad range {span!r}") from None
        if not sep:
            raise ManifestError(f"{where}: bad range {span!r}")
    return Implementation(ident, tactic_, kind_, flag == "string", tuple(ranges))


def parse_ground_truth(text: str, base_dir: str | Path = ".") -> list[Sample]:
    base_dir = Path(base_dir)
    samples: list[tuple[Path, list[Implementation]]] = []
    ids = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        where = f"line {lineno}"
        if parts[0] == "sample":
            if len(parts) != 2:
                raise ManifestError(f"{where}: sample takes one path")
            samples.append((base_dir / parts[1], []))
        elif parts[0] == "impl":
            if not samples:
                raise ManifestError(f"{where}: impl before any sample")
            impl = _parse_impl(parts, where)
            if impl.id in ids:
                raise ManifestError(f"{where}: duplicate implementation id {impl.id}")
            ids.add(impl.id)
            samples[-1][1].append(impl)
        else:
            raise ManifestError(f"{where}: unknown directive {parts[0]!r}")
    return [Sample(p, tuple(impls)) for p, impls in samples]


@dataclass(frozen=True)
class Tally:
    detected: int = 0
    total: int = 0

    def __post_init__(self):
        if not 0 <= self.detected <= self.total:
            raise ValueError("detected must lie in 0..total")

    @property
    def rate(self) -> float:
        """Detection rate in percent, rounded to 2 decimals."""
        return round(100.0 * self.detected / self.total, 2) if self.total else 0.0

    def add(self, detected: bool) -> "Tally":
        return Tally(self.detected + int(detected), self.total + 1)


@dataclass(frozen=True)
class CorpusStats:
    overall: Tally
    by_tactic: dict[str, Tally]
    by_kind: dict[str, Tally]
    by_string: dict[str, Tally]

    def as_dict(self) -> dict:
        def t(x: Tally):
            return {"detected": x.detected, "total": x.total, "rate": x.rate}
        return {
            "overall": t(self.overall),
            "by_tactic": {k: t(v) for k, v in self.by_tactic.items()},
            "by_implementation": {k: t(v) for k, v in self.by_kind.items()},
            "by_string": {k: t(v) for k, v in self.by_string.items()},
        }


def is_detected(impl: Implementation, positives: Iterable[int]) -> bool:
    """Detected iff some positive block starts inside one of its ranges."""
    return any(impl.covers(a) for a in positives)


def aggregate(outcomes: Iterable[tuple[Implementation, bool]]) -> CorpusStats:
    overall = Tally()
    by_tactic = {t.value: Tally() for t in Tactic}
    by_kind = {k.value: Tally() for k in ImplementationKind}
    by_string = {"string": Tally(), "no_string": Tally()}
    for impl, hit in outcomes:
        overall = overall.add(hit)
        by_tactic[impl.tactic.value] = by_tactic[impl.tactic.value].add(hit)
        by_kind[impl.kind.value] = by_kind[impl.kind.value].add(hit)
        key = "string" if impl.involves_string else "no_string"
        by_string[key] = by_string[key].add(hit)
    return CorpusStats(overall, by_tactic, by_kind, by_string)


@dataclass(frozen=True)
class CorpusEvaluation:
    stats: CorpusStats
    outcomes: tuple[tuple[str, bool], ...]
    benign_positives: dict[str, int]
    reports: dict[str, Report]

    def as_dict(self) -> dict:
        return {
            "stats": self.stats.as_dict(),
            "implementations": {ident: hit for ident, hit in self.outcomes},
            "benign_positives": dict(self.benign_positives),
            "samples": {
                name: {"status": r.status, "total_blocks": r.total_blocks,
                       "positives": [f"0x{a:x}" for a in r.positives]}
                for name, r in self.reports.items()
            },
        }


def evaluate_corpus(manifest: str | Path, config: AnalysisConfig | None = None) -> CorpusEvaluation:
    """Analyze every sample in a ground-truth manifest and score detections."""
    manifest = Path(manifest)
    try:
        samples = parse_ground_truth(manifest.read_text(), manifest.parent)
    except OSError as exc:
        raise ManifestError(str(exc)) from exc
    outcomes, pairs, benign, reports = [], [], {}, {}
    for sample in samples:
        report = analyze(sample.path, config)
        if report.status == "error":
            if report.error and report.error.get("stage") == "rating":
                raise RatingError(report.error["message"])
            raise ManifestError(f"{sample.path}: {report.error}")
        name = str(sample.path.relative_to(manifest.parent))
        reports[name] = report
        positives = report.positives
        if not sample.implementations:
            benign[name] = len(positives)
        for impl in sample.implementations:
            hit = is_detected(impl, positives)
            pairs.append((impl, hit))
            outcomes.append((impl.id, hit))
    return CorpusEvaluation(aggregate(pairs), tuple(outcomes), benign, reports)
