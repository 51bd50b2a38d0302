"""Dataset ingestion, core filtering, leave-one-out splitting and candidate sampling."""
from __future__ import annotations

import ast
import calendar
import csv
import io
import json
import logging
import re
import time
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Optional, Union

import numpy as np

from .errors import EmptyResult, InsufficientItems, MalformedInput, UnknownFormat

logger = logging.getLogger(__name__)

FORMATS = ("ml1m", "amazon_jsonl", "retail_csv", "generic_tsv")
STRATEGIES = ("random", "popularity")
MALFORMED_LIMIT = 0.01
RETAIL_DATE_FORMAT = "%d/%m/%Y %H:%M"

Source = Union[bytes, str, Path, IO[bytes]]


class Interaction(NamedTuple):
    user_id: str
    item_id: str
    rating: Optional[float]
    timestamp: int


class InteractionLog:
    """Interactions in input order plus a per-user chronological index.

    Per-user lists are sorted by timestamp with a stable sort, so ties keep
    input order.
    """

    def __init__(self, interactions: Iterable[Interaction]):
        self.interactions: tuple[Interaction, ...] = tuple(interactions)
        grouped: dict[str, list[Interaction]] = defaultdict(list)
        for x in self.interactions:
            grouped[x.user_id].append(x)
        self.by_user: dict[str, tuple[Interaction, ...]] = {
            u: tuple(sorted(xs, key=lambda x: x.timestamp)) for u, xs in grouped.items()
        }
        self.parse_stats: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.interactions)

    def __iter__(self):
        return iter(self.interactions)

    @cached_property
    def users(self) -> list[str]:
        return sorted(self.by_user)

    @cached_property
    def items(self) -> list[str]:
        return sorted({x.item_id for x in self.interactions})

    def item_counts(self) -> Counter:
        """Event counts per item (repeat clicks count every time)."""
        return Counter(x.item_id for x in self.interactions)

    def sequence(self, user_id: str) -> list[str]:
        return [x.item_id for x in self.by_user.get(user_id, ())]


@dataclass(frozen=True)
class CatalogRecord:
    title: str
    attributes: tuple[tuple[str, str], ...] = ()


@dataclass
class ItemCatalog:
    items: dict[str, CatalogRecord] = field(default_factory=dict)
    schema: tuple[str, ...] = ()
    # user-side attributes are accepted but no downstream stage reads them
    user_attributes: dict[str, dict[str, str]] = field(default_factory=dict)

    def title(self, item_id: str) -> str:
        rec = self.items.get(item_id)
        return rec.title if rec is not None else item_id

    def attributes(self, item_id: str) -> tuple[tuple[str, str], ...]:
        rec = self.items.get(item_id)
        return rec.attributes if rec is not None else ()

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.items

    def __len__(self) -> int:
        return len(self.items)

    def restrict(self, item_ids: Iterable[str]) -> "ItemCatalog":
        keep = set(item_ids)
        return ItemCatalog(
            {k: v for k, v in self.items.items() if k in keep}, self.schema, self.user_attributes
        )


@dataclass
class SplitCorpus:
    train: InteractionLog
    valid: dict[str, Interaction]
    test: dict[str, Interaction]

    @cached_property
    def items(self) -> list[str]:
        s = set(self.train.items)
        s.update(x.item_id for x in self.valid.values())
        s.update(x.item_id for x in self.test.values())
        return sorted(s)

    def user_items(self, user_id: str) -> set[str]:
        out = set(self.train.sequence(user_id))
        for part in (self.valid, self.test):
            if user_id in part:
                out.add(part[user_id].item_id)
        return out

    @cached_property
    def train_item_freq(self) -> Counter:
        return self.train.item_counts()


@dataclass(frozen=True)
class RankingTask:
    user_id: str
    history: tuple[str, ...]
    candidates: tuple[str, ...]
    truth_index: int
    sampling_strategy: str = "random"

    @property
    def truth_item(self) -> str:
        return self.candidates[self.truth_index]

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "history": list(self.history),
            "candidates": list(self.candidates),
            "truth_index": self.truth_index,
            "sampling_strategy": self.sampling_strategy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankingTask":
        return cls(
            d["user_id"],
            tuple(d["history"]),
            tuple(d["candidates"]),
            int(d["truth_index"]),
            d.get("sampling_strategy", "random"),
        )


# ---------------------------------------------------------------- parsing


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    return source.read()


def _decode(raw: bytes, latin1_ok: bool) -> str:
    try:
        return raw.decode("utf-8-sig")
    except UnicodeDecodeError:
        if latin1_ok:
            return raw.decode("latin-1")
        raise


def _parse_ml1m(line: str) -> Interaction:
    user, item, rating, ts = line.split("::")
    return Interaction(user, item, float(rating), int(ts))


def _parse_tsv(line: str) -> Interaction:
    parts = line.split("\t")
    if len(parts) != 4:
        raise ValueError("expected 4 tab-separated fields")
    user, item, rating, ts = parts
    return Interaction(user, item, float(rating) if rating.strip() else None, int(ts))


def _parse_amazon(line: str) -> Interaction:
    rec = json.loads(line)
    rating = rec.get("overall")
    return Interaction(
        str(rec["reviewerID"]),
        str(rec["asin"]),
        float(rating) if rating is not None else None,
        int(rec["unixReviewTime"]),
    )


def _check(user: str, item: str, ts: int) -> None:
    if not user or not item:
        raise ValueError("empty id")
    if ts < 0:
        raise ValueError("negative timestamp")


def _retail_rows(text: str):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return
    for row in reader:
        yield row


def _retail_user(row: dict) -> str:
    cid = (row.get("CustomerID") or "").strip()
    if cid.endswith(".0"):
        cid = cid[:-2]
    return cid


def _retail_timestamp(value: str, date_format: str) -> int:
    return calendar.timegm(time.strptime(value.strip(), date_format))


def parse_interactions(
    source: Source, format: str, *, date_format: str = RETAIL_DATE_FORMAT
) -> InteractionLog:
    """Parse a raw dataset file into an :class:`InteractionLog`.

    Unparseable lines are counted; more than 1% of them raises
    :class:`MalformedInput`. Counts land in ``log.parse_stats``.
    """
    if format not in FORMATS:
        raise UnknownFormat(format)
    text = _decode(_read_bytes(source), latin1_ok=format == "retail_csv")
    out: list[Interaction] = []
    total = malformed = skipped = 0

    if format == "retail_csv":
        for row in _retail_rows(text):
            total += 1
            try:
                invoice = (row.get("InvoiceNo") or "").strip()
                qty = float(row["Quantity"])
                user = _retail_user(row)
                item = (row.get("StockCode") or "").strip()
                ts = _retail_timestamp(row["InvoiceDate"], date_format)
            except (KeyError, ValueError, TypeError):
                malformed += 1
                continue
            # guest checkouts, cancellations and returns are not clicks
            if not user or invoice.startswith("C") or qty <= 0:
                skipped += 1
                continue
            if not item:
                malformed += 1
                continue
            out.append(Interaction(user, item, None, ts))
    else:
        parse = {"ml1m": _parse_ml1m, "generic_tsv": _parse_tsv, "amazon_jsonl": _parse_amazon}[format]
        for line in text.splitlines():
            if not line.strip():
                continue
            total += 1
            try:
                x = parse(line.rstrip("\r\n"))
                _check(x.user_id, x.item_id, x.timestamp)
            except (ValueError, KeyError, TypeError, json.JSONDecodeError):
                malformed += 1
                continue
            out.append(x)

    if total and malformed / total > MALFORMED_LIMIT:
        raise MalformedInput(f"{malformed}/{total} unparseable records in {format} input")
    if malformed:
        logger.warning("skipped %d malformed %s records", malformed, format)
    log = InteractionLog(out)
    log.parse_stats = {"records": total, "malformed": malformed, "skipped": skipped}
    return log


_YEAR_RE = re.compile(r"\((\d{4})\)\s*$")


def parse_ml1m_movies(source: Source) -> ItemCatalog:
    text = _decode(_read_bytes(source), latin1_ok=True)
    items = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        item_id, title, genres = line.split("::")
        attrs = [("genre", g) for g in genres.split("|") if g]
        m = _YEAR_RE.search(title)
        if m:
            attrs.append(("year", m.group(1)))
        items[item_id] = CatalogRecord(title.strip(), tuple(attrs))
    return ItemCatalog(items, ("genre", "year"))


def _load_loose_json(line: str) -> dict:
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        # the 2014 Amazon metadata dump is python-literal, not JSON
        return ast.literal_eval(line)


def parse_amazon_meta(source: Source) -> ItemCatalog:
    text = _decode(_read_bytes(source), latin1_ok=True)
    items = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            rec = _load_loose_json(line)
        except (ValueError, SyntaxError):
            continue
        asin = str(rec.get("asin", "")).strip()
        if not asin:
            continue
        title = str(rec.get("title") or "").strip() or asin
        attrs: list[tuple[str, str]] = []
        brand = str(rec.get("brand") or "").strip()
        if brand:
            attrs.append(("brand", brand))
        cats = rec.get("categories") or rec.get("category") or []
        leaves: list[str] = []
        for path in cats:
            leaf = path[-1] if isinstance(path, list) and path else path
            if isinstance(leaf, str) and leaf.strip() and leaf.strip() not in leaves:
                leaves.append(leaf.strip())
        attrs.extend(("category", c) for c in leaves)
        items[asin] = CatalogRecord(title, tuple(attrs))
    return ItemCatalog(items, ("brand", "category"))


def parse_retail_catalog(source: Source) -> ItemCatalog:
    """Titles from the Description column; the dataset has no attributes."""
    text = _decode(_read_bytes(source), latin1_ok=True)
    items: dict[str, CatalogRecord] = {}
    for row in _retail_rows(text):
        code = (row.get("StockCode") or "").strip()
        desc = (row.get("Description") or "").strip()
        if code and desc and code not in items:
            items[code] = CatalogRecord(desc)
    return ItemCatalog(items, ())


def read_catalog_jsonl(source: Source) -> ItemCatalog:
    text = _decode(_read_bytes(source), latin1_ok=False)
    items = {}
    schema: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "schema" in rec and "item_id" not in rec:
            schema = list(rec["schema"])
            continue
        attrs = tuple((str(n), str(v)) for n, v in rec.get("attributes", []))
        items[str(rec["item_id"])] = CatalogRecord(str(rec["title"]), attrs)
        for n, _ in attrs:
            if n not in schema:
                schema.append(n)
    return ItemCatalog(items, tuple(schema))


def write_catalog_jsonl(catalog: ItemCatalog, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"schema": list(catalog.schema)}) + "\n")
        for item_id in sorted(catalog.items):
            rec = catalog.items[item_id]
            row = {"item_id": item_id, "title": rec.title, "attributes": [list(a) for a in rec.attributes]}
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def write_tsv_log(log: InteractionLog, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x in log.interactions:
            rating = "" if x.rating is None else repr(float(x.rating))
            f.write(f"{x.user_id}\t{x.item_id}\t{rating}\t{x.timestamp}\n")


# -------------------------------------------------------------- filtering


def filter_rating(log: InteractionLog, min_rating: float) -> InteractionLog:
    """Keep events rated at least ``min_rating``; unrated events are kept."""
    return InteractionLog(x for x in log if x.rating is None or x.rating >= min_rating)


def filter_core(log: InteractionLog, min_count: int) -> InteractionLog:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    current = list(log.interactions)
    while True:
        users = Counter(x.user_id for x in current)
        items = Counter(x.item_id for x in current)
        kept = [x for x in current if users[x.user_id] >= min_count and items[x.item_id] >= min_count]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise EmptyResult(f"nothing survives {min_count}-core filtering")
    return InteractionLog(current)


def split_leave_one_out(log: InteractionLog) -> SplitCorpus:
    train: list[Interaction] = []
    valid: dict[str, Interaction] = {}
    test: dict[str, Interaction] = {}
    for user in log.users:
        seq = log.by_user[user]
        if len(seq) < 3:
            train.extend(seq)
            continue
        train.extend(seq[:-2])
        valid[user] = seq[-2]
        test[user] = seq[-1]
    return SplitCorpus(InteractionLog(train), valid, test)


def write_split_manifest(split: SplitCorpus, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for user in split.train.users:
            for item in split.train.sequence(user):
                f.write(json.dumps({"user": user, "item": item, "role": "train"}) + "\n")
            for role, part in (("valid", split.valid), ("test", split.test)):
                if user in part:
                    f.write(json.dumps({"user": user, "item": part[user].item_id, "role": role}) + "\n")


def read_split_manifest(path: Union[str, Path]) -> SplitCorpus:
    """Inverse of :func:`write_split_manifest`; timestamps become per-user ordinals."""
    train: list[Interaction] = []
    valid: dict[str, Interaction] = {}
    test: dict[str, Interaction] = {}
    clock: Counter = Counter()
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            u = row["user"]
            x = Interaction(u, row["item"], None, clock[u])
            clock[u] += 1
            if row["role"] == "train":
                train.append(x)
            elif row["role"] == "valid":
                valid[u] = x
            else:
                test[u] = x
    return SplitCorpus(InteractionLog(train), valid, test)


# --------------------------------------------------------------- sampling


def user_rng(seed: int, user_id: str, salt: int = 0) -> np.random.Generator:
    """Generator seeded from the run seed and a stable hash of the user id."""
    return np.random.default_rng([int(seed), zlib.crc32(user_id.encode("utf-8")), salt])


def sample_candidates(
    split: SplitCorpus,
    user_id: str,
    strategy: str = "random",
    n_neg: int = 19,
    seed: int = 0,
    max_history: int = 50,
) -> RankingTask:
    """Build the ranking task for one test user.

    Negatives come from the filtered item set minus everything the user
    touched. ``popularity`` draws them with probability proportional to
    train click frequency, without replacement.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    truth = split.test[user_id].item_id
    seen = split.user_items(user_id)
    pool = [i for i in split.items if i not in seen]
    rng = user_rng(seed, user_id, STRATEGIES.index(strategy))

    if strategy == "random":
        if len(pool) < n_neg:
            raise InsufficientItems(f"{len(pool)} eligible items < {n_neg}")
        picks = rng.choice(len(pool), size=n_neg, replace=False) if n_neg else []
        negatives = [pool[k] for k in picks]
    else:
        freq = split.train_item_freq
        weights = np.array([freq.get(i, 0) for i in pool], dtype=float)
        nonzero = int((weights > 0).sum())
        if nonzero < n_neg:
            raise InsufficientItems(f"{nonzero} eligible items with nonzero frequency < {n_neg}")
        picks = rng.choice(len(pool), size=n_neg, replace=False, p=weights / weights.sum()) if n_neg else []
        negatives = [pool[k] for k in picks]

    candidates = [truth] + negatives
    order = rng.permutation(len(candidates))
    candidates = [candidates[k] for k in order]
    # repeat purchases: the held-out item may occur earlier; drop it from history
    seq = [i for i in split.train.sequence(user_id) if i != truth]
    history = tuple(seq[-max_history:]) if max_history > 0 else ()
    return RankingTask(user_id, history, tuple(candidates), candidates.index(truth), strategy)


def build_tasks(
    split: SplitCorpus,
    strategy: str = "random",
    n_neg: int = 19,
    seed: int = 0,
    max_history: int = 50,
    sample_cap: Optional[int] = 1000,
) -> list[RankingTask]:
    users = sorted(split.test)
    if sample_cap and len(users) > sample_cap:
        rng = np.random.default_rng(seed)
        users = sorted(rng.choice(users, size=sample_cap, replace=False).tolist())
    return [sample_candidates(split, u, strategy, n_neg, seed, max_history) for u in users]


def write_tasks(tasks: Iterable[RankingTask], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")


def read_tasks(path: Union[str, Path]) -> list[RankingTask]:
    with open(path, encoding="utf-8") as f:
        return [RankingTask.from_dict(json.loads(line)) for line in f if line.strip()]
