"""Completion backends (http, replay, mock oracle) and ranking parse-back."""
from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import httpx

from .corpus import RankingTask
from .errors import CacheMiss, ConfigError, GatewayError, RateLimited, Timeout
from .knowledge import KnowledgePack
from .prompts import RenderedPrompt

log = logging.getLogger(__name__)

BACKENDS = ("http", "replay", "mock_oracle")
_RETRY_STATUS = {429, 500, 502, 503, 504}


@dataclass
class CompletionConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    max_attempts: int = 5
    backoff: float = 1.0
    backoff_factor: float = 2.0
    concurrency: int = 4
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")


def cache_key(model: str, temperature: float, prompt: str) -> str:
    blob = json.dumps([model, float(temperature), prompt], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ReplayCache:
    """Content-addressed response store; reads are lock-free, writes serialized."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self._lock = threading.Lock()

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> str:
        try:
            with open(self.path(key), encoding="utf-8") as f:
                return json.load(f)["response_text"]
        except FileNotFoundError:
            raise CacheMiss(key) from None

    def put(self, key: str, prompt: str, response: str, model: str) -> None:
        row = {
            "prompt_sha": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            "response_text": response,
            "model": model,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        with self._lock:
            self.root.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(row, f, ensure_ascii=False)
            os.replace(tmp, self.path(key))


# ---------------------------------------------------------------- mock oracle


def mock_oracle_rank(task: RankingTask, pack: KnowledgePack, title: Callable[[str], str] = str) -> str:
    """A ranker that just follows the knowledge it was given."""
    cands = list(task.candidates)
    if pack.variant == "his_cand_u2i" and pack.u2i_list:
        listed = [i for i, _ in pack.u2i_list if i in task.candidates]
        order = listed + [c for c in cands if c not in set(listed)]
    elif pack.variant == "his_cand_i2i":
        best: dict[str, float] = {}
        for _, block in pack.i2i_blocks:
            for item, score in block:
                best[item] = max(best.get(item, float("-inf")), score)
        pos = sorted(range(len(cands)), key=lambda k: (-best.get(cands[k], float("-inf")), k))
        order = [cands[k] for k in pos]
    else:
        order = cands
    return json.dumps([title(i) for i in order], ensure_ascii=False)


# ------------------------------------------------------------------- gateway


class Gateway:
    """Turns rendered prompts into raw completion text.

    ``transport`` and ``sleep`` are injectable so retries and concurrency
    can be exercised without a network.
    """

    def __init__(
        self,
        config: CompletionConfig = CompletionConfig(),
        backend: str = "mock_oracle",
        cache_dir: Optional[Union[str, Path]] = None,
        *,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
        title: Callable[[str], str] = str,
        environ=None,
    ):
        if backend not in BACKENDS:
            raise ConfigError(f"unknown backend {backend!r}")
        if backend == "replay" and cache_dir is None:
            raise ConfigError("replay backend needs a cache directory")
        self.config = config
        self.backend = backend
        self.cache = ReplayCache(cache_dir) if cache_dir is not None else None
        self.title = title
        self._transport = transport
        self._sleep = sleep
        self._environ = os.environ if environ is None else environ
        self._slots = threading.BoundedSemaphore(config.concurrency)
        self._client: Optional[httpx.Client] = None
        self._client_lock = threading.Lock()

    def _http_client(self) -> httpx.Client:
        with self._client_lock:
            if self._client is None:
                self._client = httpx.Client(transport=self._transport, timeout=self.config.timeout)
            return self._client

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def _api_key(self) -> str:
        key = self._environ.get(self.config.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {self.config.api_key_env} is not set")
        return key

    def _post(self, prompt: str) -> str:
        cfg = self.config
        body = {
            "model": cfg.model,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        }
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        client = self._http_client()
        last: Optional[Exception] = None
        for attempt in range(cfg.max_attempts):
            if attempt:
                delay = cfg.backoff * cfg.backoff_factor ** (attempt - 1)
                log.info("retrying completion in %.1fs (attempt %d)", delay, attempt + 1)
                self._sleep(delay)
            try:
                with self._slots:
                    resp = client.post(cfg.endpoint, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = Timeout(f"request timed out after {cfg.timeout}s")
                last.__cause__ = exc
                continue
            except httpx.TransportError as exc:
                last = GatewayError(f"transport error: {type(exc).__name__}")
                continue
            if resp.status_code in _RETRY_STATUS:
                cls = RateLimited if resp.status_code == 429 else GatewayError
                last = cls(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise GatewayError("unexpected response shape") from None
        assert last is not None
        raise last

    def complete(self, prompt: RenderedPrompt, pack: Optional[KnowledgePack] = None) -> str:
        if self.backend == "mock_oracle":
            if prompt.task is None:
                raise ConfigError("mock_oracle needs the prompt's task")
            return mock_oracle_rank(prompt.task, pack or KnowledgePack(prompt.variant), self.title)
        key = cache_key(self.config.model, self.config.temperature, prompt.text)
        if self.backend == "replay":
            return self.cache.get(key)
        text = self._post(prompt.text)
        if self.cache is not None:
            self.cache.put(key, prompt.text, text, self.config.model)
        return text

    def complete_many(
        self, prompts: Sequence[RenderedPrompt], packs: Optional[Sequence[Optional[KnowledgePack]]] = None
    ) -> list[Union[str, Exception]]:
        """Complete all prompts; failures come back as exception objects in place."""
        packs = list(packs) if packs is not None else [None] * len(prompts)

        def one(k: int):
            try:
                return self.complete(prompts[k], packs[k])
            except (GatewayError, CacheMiss, ConfigError) as exc:
                return exc

        if self.backend != "http" or self.config.concurrency == 1:
            return [one(k) for k in range(len(prompts))]
        with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
            return list(pool.map(one, range(len(prompts))))


# ----------------------------------------------------------------- parsing

_YEAR = re.compile(r"\s*\(\d{4}\)\s*$")
_WORD = re.compile(r"\w+")


def normalize_title(title: str) -> str:
    t = " ".join(title.lower().split())
    return _YEAR.sub("", t).strip()


def _tokens(title: str) -> set[str]:
    return set(_WORD.findall(normalize_title(title)))


def token_overlap(a: str, b: str) -> float:
    ta, tb = _tokens(a), _tokens(b)
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / max(len(ta), len(tb))


def extract_array(raw: str) -> Optional[list[str]]:
    """First bracketed list of strings in ``raw``; prose and code fences are skipped."""
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\[", raw):
        start = m.start()
        try:
            value, _ = decoder.raw_decode(raw, start)
        except ValueError:
            value = _literal_list(raw, start)
        if isinstance(value, list) and value and all(isinstance(v, str) for v in value):
            return value
    return None


def _literal_list(raw: str, start: int):
    depth = 0
    for k in range(start, len(raw)):
        if raw[k] == "[":
            depth += 1
        elif raw[k] == "]":
            depth -= 1
            if depth == 0:
                try:
                    return ast.literal_eval(raw[start:k + 1])
                except (ValueError, SyntaxError, MemoryError, RecursionError):
                    return None
    return None


@dataclass(frozen=True)
class RankedList:
    order: tuple[int, ...]
    parse_report: dict = field(default_factory=dict)

    def rank_of(self, index: int) -> int:
        """1-based position of candidate ``index``."""
        return self.order.index(index) + 1

    def items(self, task: RankingTask) -> list[str]:
        return [task.candidates[k] for k in self.order]

    def to_dict(self) -> dict:
        return {"order": list(self.order), "parse_report": dict(self.parse_report)}

    @classmethod
    def from_dict(cls, d: dict) -> "RankedList":
        return cls(tuple(int(k) for k in d["order"]), dict(d.get("parse_report", {})))


FUZZY_THRESHOLD = 0.8


def parse_ranking(raw: str, task: RankingTask, title: Callable[[str], str] = str) -> RankedList:
    """Map an LLM reply back to a full permutation of the candidates."""
    titles = [title(c) for c in task.candidates]
    n = len(titles)
    report = {"matched": 0, "fuzzy": 0, "missing": 0, "hallucinated": 0, "duplicates": 0, "failed": False}
    names = extract_array(raw) if raw else None
    if names is None:
        report.update(missing=n, failed=True)
        return RankedList(tuple(range(n)), report)

    exact: dict[str, list[int]] = {}
    norm: dict[str, list[int]] = {}
    for k, t in enumerate(titles):
        exact.setdefault(t.strip(), []).append(k)
        norm.setdefault(normalize_title(t), []).append(k)
    used: set[int] = set()
    order: list[int] = []

    def take(pool: list[int]) -> Optional[int]:
        free = [k for k in pool if k not in used]
        return free[0] if free else None

    for name in names:
        kind, pool = None, None
        if name.strip() in exact:
            kind, pool = "matched", exact[name.strip()]
        elif normalize_title(name) in norm:
            kind, pool = "fuzzy", norm[normalize_title(name)]
        else:
            scores = [token_overlap(name, t) for t in titles]
            best = max(scores, default=0.0)
            if best > FUZZY_THRESHOLD:
                kind = "fuzzy"
                pool = [k for k, s in enumerate(scores) if s == best]
        if kind is None:
            report["hallucinated"] += 1
            continue
        k = take(pool)
        if k is None:
            report["duplicates"] += 1
            continue
        used.add(k)
        order.append(k)
        report[kind] += 1
    rest = [k for k in range(n) if k not in used]
    report["missing"] = len(rest)
    return RankedList(tuple(order + rest), report)


def serialize_ranking(ranked: RankedList, task: RankingTask, title: Callable[[str], str] = str) -> str:
    return json.dumps([title(c) for c in ranked.items(task)], ensure_ascii=False)


# ------------------------------------------------- two-call summarize/rank

SUMMARY_PROMPT = (
    "Here is the {acting} history of a user in the past in order: {history}\n"
    "Please summarize this user's preferences in a few sentences."
)
SUMMARY_RANK_PROMPT = (
    "You are a {item} recommender system now.\n"
    "Here is a summary of a user's preferences: {summary}\n"
    "Now there are {n} candidate {items} that this user can {act} next: {candidates}\n"
    "Please rank the {n} candidate {items} by measuring the possibilities that this user would like to {act} next most, "
    "according to the summary. Please think step by step.\n"
    "Your output is only allowed to be a rerank of the candidate list. Do not add {items} out of the candidate list.\n"
    "Please give the results as JSON array (from highest to lowest priority, {item} names only):\n"
)


def summarize_then_rank(gateway: Gateway, task: RankingTask, title: Callable[[str], str] = str,
                        lexicon: str = "movie") -> RankedList:
    """Two single-turn calls: summarize the history, then rank given the summary."""
    from .prompts import LEXICONS, estimate_tokens, title_list

    lex = LEXICONS[lexicon]
    first = SUMMARY_PROMPT.format(history=title_list(title(i) for i in task.history), **lex)
    summary = gateway.complete(RenderedPrompt(first, task.user_id, "none", "multi_summary",
                                              estimate_tokens(first), task))
    second = SUMMARY_RANK_PROMPT.format(summary=summary.strip(), n=len(task.candidates),
                                        candidates=title_list(title(c) for c in task.candidates), **lex)
    raw = gateway.complete(RenderedPrompt(second, task.user_id, "none", "multi_rank",
                                          estimate_tokens(second), task))
    return parse_ranking(raw, task, title)
