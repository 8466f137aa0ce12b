"""Static triage of basic blocks that implement anti-dynamic-analysis checks
in x86 PE binaries.

Typical use::

    from tadaspot import analyze, emit_report
    report = analyze("sample.exe")
    print(report.positives)
"""

from .loader import (
    BinaryImage,
    PackerHeuristicConfig,
    PackingVerdict,
    detect_packing,
    load_fixture,
    load_path,
    parse_pe,
)
from .disasm import (
    build_cfg,
    disassemble_function,
    discover_functions,
    function_cfg,
    has_single_block_loop,
    trace_register_back,
)
from .rating import (
    LocalRuleBackend,
    RatingConfig,
    RemoteChatBackend,
    build_prompt,
    classify,
    local_rule_rater,
    parse_rating,
    rate,
)
from .report import AnalysisConfig, Report, analyze, emit_report, evaluate_corpus

__version__ = "0.1.0"

__all__ = [
    "BinaryImage",
    "PackerHeuristicConfig",
    "PackingVerdict",
    "detect_packing",
    "load_fixture",
    "load_path",
    "parse_pe",
    "build_cfg",
    "disassemble_function",
    "discover_functions",
    "function_cfg",
    "has_single_block_loop",
    "trace_register_back",
    "LocalRuleBackend",
    "RatingConfig",
    "RemoteChatBackend",
    "build_prompt",
    "classify",
    "local_rule_rater",
    "parse_rating",
    "rate",
    "AnalysisConfig",
    "Report",
    "analyze",
    "emit_report",
    "evaluate_corpus",
]
