"""Prompt construction, rating backends and threshold classification."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from .features import PREFIXES, Feature, FeatureKind

log = logging.getLogger(__name__)

__all__ = [
    "PROMPT_HEADER",
    "Prompt",
    "RatingConfig",
    "RatingRecord",
    "RatingError",
    "BackendError",
    "BackendUnavailable",
    "UnparsableResponse",
    "RatingBackend",
    "LocalRuleBackend",
    "RemoteChatBackend",
    "RatingCache",
    "build_prompt",
    "parse_rating",
    "classify",
    "local_rule_rater",
    "load_lexicon",
    "rate",
    "rate_all",
]

PROMPT_HEADER = (
    "I want you to help me identify whether a basic block in a binary program is related to "
    "anti-dynamic analysis techniques, such as detecting a debugger, sandbox and/or VM.\n"
    "I will provide some static analysis results of the basic block, including 1) Called APIs (API), "
    "2) Static Strings referred, 3) Uncommon instructions (INS), and 4) Segment Register Reference (SegReg)\n"
    "Rate from 0 to 10, how likely the code is related to anti-analysis.\n"
    "\n"
    "I will use your answer to decide whether to put a breakpoint at the basic block, so try to avoid "
    "false negatives, and DO NOT consider anti-static analysis techniques.\n"
    "Please only give the rating number, no explanation"
)


@dataclass(frozen=True)
class Prompt:
    block_id: tuple[int, int] | None
    feature_lines: tuple[str, ...]
    header: str = PROMPT_HEADER

    @property
    def rendered(self) -> str:
        return self.header + "\n\n" + "".join(f"- {line}\n" for line in self.feature_lines)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.rendered.encode("utf-8")).hexdigest()


def build_prompt(features: Sequence[Feature | str], block_id: tuple[int, int] | None = None) -> Prompt:
    """Bullet the features under the fixed header.

    :class:`Feature` objects are grouped assembly, strings, APIs, each by
    address (stable); plain strings keep the order given.
    """
    if features and all(isinstance(f, Feature) for f in features):
        ordered = sorted(features, key=lambda f: f.sort_key)
        lines = tuple(f.text for f in ordered)
        if block_id is None:
            block_id = features[0].block_id
    else:
        lines = tuple(f.text if isinstance(f, Feature) else str(f) for f in features)
    return Prompt(block_id, lines)


@dataclass(frozen=True)
class RatingConfig:
    threshold: int = 7
    # total attempts per prompt
    max_retries: int = 3
    request_timeout: float = 60.0
    max_in_flight: int = 4
    backoff_initial: float = 1.0

    def __post_init__(self):
        if not 0 <= self.threshold <= 10:
            raise ValueError("threshold must lie in 0..10")
        if self.max_retries < 1 or self.max_in_flight < 1:
            raise ValueError("max_retries and max_in_flight must be >= 1")


@dataclass(frozen=True)
class RatingRecord:
    block_id: tuple[int, int] | None
    rating: int
    positive: bool
    backend_id: str
    raw_response: str
    prompt_sha256: str = ""

    def __post_init__(self):
        if not 0 <= self.rating <= 10:
            raise ValueError(f"rating {self.rating} outside 0..10")


class RatingError(Exception):
    pass


class BackendError(RatingError):
    """One failed exchange with a backend (transport, HTTP status, bad payload)."""


class BackendUnavailable(RatingError):
    pass


class UnparsableResponse(RatingError):
    pass


def parse_rating(text: str) -> int:
    """Lone integer 0..10, else the first in-range integer token."""
    stripped = text.strip()
    if re.fullmatch(r"\d+", stripped) and int(stripped) <= 10:
        return int(stripped)
    for token in re.findall(r"(?<![\d.])-?\d+", stripped):
        if 0 <= int(token) <= 10:
            return int(token)
    raise UnparsableResponse(f"no rating in {text!r}")


def classify(rating: int, config: RatingConfig | None = None) -> bool:
    threshold = (config or RatingConfig()).threshold
    return rating >= threshold


# --------------------------------------------------------------------------
# Local rule rater

DIRECT_ANTI_ANALYSIS_APIS = frozenset({
    "IsDebuggerPresent", "CheckRemoteDebuggerPresent",
    "NtQueryInformationProcess", "ZwQueryInformationProcess",
    "NtSetInformationThread", "ZwSetInformationThread",
    "NtQueryObject", "OutputDebugStringA", "OutputDebugStringW",
    "DbgUiRemoteBreakin", "BlockInput",
})

FINGERPRINT_APIS = frozenset({
    "GetVolumeInformationA", "GetVolumeInformationW",
    "GetComputerNameA", "GetComputerNameW", "GetComputerNameExA", "GetComputerNameExW",
    "GetUserNameA", "GetUserNameW",
    "GlobalMemoryStatusEx", "GetSystemFirmwareTable", "GetAdaptersInfo",
    "EnumDisplayDevicesA", "EnumDisplayDevicesW",
    "GetDiskFreeSpaceExA", "GetDiskFreeSpaceExW",
    "Process32First", "Process32Next", "Process32FirstW", "Process32NextW",
    "FindWindowA", "FindWindowW", "FindWindowExA", "FindWindowExW",
    "GetThreadContext", "GetCursorPos",
})

STRONG_MNEMONICS = frozenset({"cpuid", "rdtsc", "sidt", "sgdt", "sldt", "str", "icebp"})
PEB_SEGMENT_FIELDS = frozenset({"fs:30h", "fs:18h"})

SCORE_DIRECT_API = 10
SCORE_PEB_ACCESS = 9
SCORE_STRONG_MNEMONIC = 9
SCORE_LEXICON_STRING = 9
SCORE_FINGERPRINT_API = 8
SCORE_ARTIFACT_ARGUMENT = 8
SCORE_LISTED_ASM = 7
SCORE_WEAK_SEGMENT = 3
SCORE_OTHER_API = 2
SCORE_OTHER_STRING = 1

_lexicon_cache: tuple[str, ...] | None = None


def load_lexicon(path: str | Path | None = None) -> tuple[str, ...]:
    global _lexicon_cache
    if path is None and _lexicon_cache is not None:
        return _lexicon_cache
    if path is None:
        text = resources.files("tadaspot.data").joinpath("tada_lexicon.txt").read_text()
    else:
        text = Path(path).read_text()
    terms = tuple(t.casefold() for t in (l.split("#", 1)[0].strip() for l in text.splitlines()) if t)
    if path is None:
        _lexicon_cache = terms
    return terms


def _matches_lexicon(text: str, lexicon: Iterable[str]) -> bool:
    folded = text.casefold()
    return any(term in folded for term in lexicon)


def _quoted(text: str) -> list[str]:
    return [m.replace('\\"', '"') for m in re.findall(r'"((?:[^"\\]|\\.)*)"', text)]


def _score_line(line: str, lexicon) -> int:
    if line.startswith(PREFIXES[FeatureKind.API_CALL]):
        name = line[len(PREFIXES[FeatureKind.API_CALL]):].split("(", 1)[0]
        if name in DIRECT_ANTI_ANALYSIS_APIS:
            return SCORE_DIRECT_API
        if name in FINGERPRINT_APIS:
            return SCORE_FINGERPRINT_API
        if any(_matches_lexicon(s, lexicon) for s in _quoted(line)):
            return SCORE_ARTIFACT_ARGUMENT
        return SCORE_OTHER_API
    if line.startswith(PREFIXES[FeatureKind.SEGMENT_ACCESS]):
        body = line[len(PREFIXES[FeatureKind.SEGMENT_ACCESS]):]
        field_ = body.split(" ", 1)[0]
        if field_ in PEB_SEGMENT_FIELDS:
            return SCORE_PEB_ACCESS
        return SCORE_WEAK_SEGMENT if body.endswith("(unknown field)") else SCORE_LISTED_ASM
    if line.startswith(PREFIXES[FeatureKind.UNCOMMON_INS]):
        mnemonic = line[len(PREFIXES[FeatureKind.UNCOMMON_INS]):].split(" ", 1)[0]
        return SCORE_STRONG_MNEMONIC if mnemonic in STRONG_MNEMONICS else SCORE_LISTED_ASM
    if line.startswith(PREFIXES[FeatureKind.STRING_REF]):
        return SCORE_LEXICON_STRING if any(_matches_lexicon(s, lexicon) for s in _quoted(line)) else SCORE_OTHER_STRING
    return 0


def _feature_lines(prompt: Prompt | str) -> list[str]:
    if isinstance(prompt, Prompt):
        return list(prompt.feature_lines)
    _, _, body = prompt.partition(PROMPT_HEADER + "\n\n")
    return [l[2:] for l in body.splitlines() if l.startswith("- ")]


def local_rule_rater(prompt: Prompt | str, lexicon: Sequence[str] | None = None) -> int:
    """Deterministic 0..10 score: the strongest single feature wins."""
    lexicon = load_lexicon() if lexicon is None else lexicon
    return max((_score_line(l, lexicon) for l in _feature_lines(prompt)), default=0)


# --------------------------------------------------------------------------
# Backends

class RatingBackend(Protocol):
    backend_id: str

    def complete(self, prompt_text: str) -> str: ...


class LocalRuleBackend:
    backend_id = "local-rules-v1"

    def __init__(self, lexicon: Sequence[str] | None = None):
        self.lexicon = lexicon

    def complete(self, prompt_text: str) -> str:
        return str(local_rule_rater(prompt_text, self.lexicon))


class RemoteChatBackend:
    """Chat-completion endpoint over HTTP(S), deterministic decoding requested.

    POST ``{base_url}/chat/completions`` with
    ``{"model", "messages": [{"role": "user", "content": prompt}], "temperature": 0,
    "top_p": 1, "n": 1, "seed": 0, "max_tokens": 8}``; the reply text is read
    from ``choices[0].message.content``.  The bearer token comes from the
    environment variable named by ``api_key_env`` (default ``TADASPOT_API_KEY``).
    """

    def __init__(self, base_url: str, model: str, api_key_env: str = "TADASPOT_API_KEY", timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.backend_id = f"remote:{model}"

    @classmethod
    def from_env(cls, timeout: float = 60.0) -> "RemoteChatBackend":
        base = os.environ.get("TADASPOT_BASE_URL")
        model = os.environ.get("TADASPOT_MODEL")
        if not base or not model:
            raise BackendUnavailable("set TADASPOT_BASE_URL and TADASPOT_MODEL for the remote backend")
        return cls(base, model, timeout=timeout)

    def request_body(self, prompt_text: str) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt_text}],
            "temperature": 0,
            "top_p": 1,
            "n": 1,
            "seed": 0,
            "max_tokens": 8,
        }

    def complete(self, prompt_text: str) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(
            self.base_url + "/chat/completions",
            data=json.dumps(self.request_body(prompt_text)).encode("utf-8"),
            headers=headers,
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise BackendError(f"{self.base_url}: {exc}") from exc
        try:
            return str(payload["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {payload!r:.200}") from exc


class RatingCache:
    """Append-only JSON-lines store, one record per (backend, prompt hash)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, dict] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._records[self._key(rec["backend"], rec["prompt_sha256"])] = rec

    @staticmethod
    def _key(backend_id: str, digest: str) -> str:
        return f"{backend_id}\0{digest}"

    def get(self, backend_id: str, digest: str) -> dict | None:
        with self._lock:
            return self._records.get(self._key(backend_id, digest))

    def put(self, backend_id: str, digest: str, rating: int, raw: str):
        rec = {"prompt_sha256": digest, "backend": backend_id, "rating": rating, "raw": raw}
        with self._lock:
            self._records[self._key(backend_id, digest)] = rec
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._records)


def rate(
    prompt: Prompt,
    backend: RatingBackend,
    config: RatingConfig | None = None,
    cache: RatingCache | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> RatingRecord:
    """Rate one prompt; empty prompts score 0 without touching the backend."""
    config = config or RatingConfig()
    digest = prompt.sha256
    if not prompt.feature_lines:
        return RatingRecord(prompt.block_id, 0, classify(0, config), "none", "", digest)
    if cache is not None:
        hit = cache.get(backend.backend_id, digest)
        if hit is not None:
            return RatingRecord(prompt.block_id, hit["rating"], classify(hit["rating"], config),
                                backend.backend_id, hit["raw"], digest)

    last: RatingError | None = None
    for attempt in range(config.max_retries):
        if attempt:
            sleep(config.backoff_initial * 2 ** (attempt - 1))
        try:
            raw = backend.complete(prompt.rendered)
            rating = parse_rating(raw)
        except (BackendError, UnparsableResponse) as exc:
            log.warning("rating attempt %d for %s failed: %s", attempt + 1, prompt.block_id, exc)
            last = exc
            continue
        if cache is not None:
            cache.put(backend.backend_id, digest, rating, raw)
        return RatingRecord(prompt.block_id, rating, classify(rating, config), backend.backend_id, raw, digest)

    if isinstance(last, UnparsableResponse):
        raise UnparsableResponse(f"{config.max_retries} unparsable responses for block {prompt.block_id}") from last
    raise BackendUnavailable(f"backend {backend.backend_id} failed {config.max_retries} times") from last


def rate_all(
    prompts: Sequence[Prompt],
    backend: RatingBackend,
    config: RatingConfig | None = None,
    cache: RatingCache | None = None,
) -> list[RatingRecord]:
    """Rate prompts with up to ``max_in_flight`` concurrent requests; input order is kept."""
    config = config or RatingConfig()
    if config.max_in_flight == 1 or len(prompts) <= 1:
        return [rate(p, backend, config, cache) for p in prompts]
    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        return list(pool.map(lambda p: rate(p, backend, config, cache), prompts))
