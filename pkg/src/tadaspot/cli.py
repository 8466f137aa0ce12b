"""Command line entry point: ``tadaspot analyze`` and ``tadaspot evaluate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .features.api import ApiKnowledgeBase
from .rating import BackendUnavailable, LocalRuleBackend, RatingCache, RatingConfig, RatingError, RemoteChatBackend
from .report import AnalysisConfig, ManifestError, analyze, emit_report, evaluate_corpus

EXIT_OK = 0
EXIT_PACKED = 2
EXIT_LOAD = 3
EXIT_BACKEND = 4


def _add_backend_args(p: argparse.ArgumentParser):
    p.add_argument("--backend", choices=("local", "remote"), default="local",
                   help="rating backend (remote reads TADASPOT_BASE_URL, TADASPOT_MODEL, TADASPOT_API_KEY)")
    p.add_argument("--threshold", type=int, default=7, help="positive when rating >= N (default 7)")
    p.add_argument("--cache", type=Path, help="JSON-lines rating cache file")
    p.add_argument("--api-db", type=Path, action="append", default=[],
                   help="extra API signature file merged over the built-in set")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--out", type=Path, help="write output here instead of stdout")


def _config(args) -> AnalysisConfig:
    rating = RatingConfig(threshold=args.threshold, max_in_flight=args.max_in_flight)
    backend = RemoteChatBackend.from_env(rating.request_timeout) if args.backend == "remote" else LocalRuleBackend()
    return AnalysisConfig(
        rating=rating,
        backend=backend,
        cache=RatingCache(args.cache) if args.cache else None,
        knowledge_base=ApiKnowledgeBase.load(*args.api_db),
        fixture=True if getattr(args, "fixture", False) else None,
        dump_prompts=getattr(args, "dump_prompts", None),
    )


def _write(data: bytes, out: Path | None):
    if out is None:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        out.write_bytes(data)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tadaspot", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="rate the basic blocks of one binary")
    a.add_argument("path", type=Path)
    _add_backend_args(a)
    a.add_argument("--format", choices=("json", "text"), default="json")
    a.add_argument("--dump-prompts", type=Path, metavar="DIR", help="write every rendered prompt to DIR")
    a.add_argument("--fixture", action="store_true", help="treat the input as a fixture manifest")

    e = sub.add_parser("evaluate", help="score detections against a ground-truth manifest")
    e.add_argument("manifest", type=Path)
    _add_backend_args(e)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
    except BackendUnavailable as exc:
        print(f"tadaspot: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (OSError, ValueError) as exc:
        print(f"tadaspot: {exc}", file=sys.stderr)
        return EXIT_LOAD

    if args.command == "analyze":
        report = analyze(args.path, config)
        _write(emit_report(report, args.format), args.out)
        if report.error:
            print(f"tadaspot: {report.error['stage']} failed: {report.error['message']}", file=sys.stderr)
        return report.exit_code

    try:
        result = evaluate_corpus(args.manifest, config)
    except ManifestError as exc:
        print(f"tadaspot: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except RatingError as exc:
        print(f"tadaspot: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    _write((json.dumps(result.as_dict(), indent=2, sort_keys=True) + "\n").encode(), args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
