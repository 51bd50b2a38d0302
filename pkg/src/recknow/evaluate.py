"""Ranking metrics, non-LLM baselines and report aggregation."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats as sstats

from .cf import CooccurrenceStats, EmbeddingTable
from .corpus import ItemCatalog, RankingTask, SplitCorpus
from .errors import MissingIndex
from .kg import tokenize
from .knowledge import candidate_scores, user_vector
from .llm import RankedList

DEFAULT_KS = (1, 5, 10)
BASELINES = ("pop", "item_cf", "bm25", "mf", "recency_tiebreak")


def _rank(ranked: Union[RankedList, Sequence[int]], truth_index: int) -> int:
    order = ranked.order if isinstance(ranked, RankedList) else list(ranked)
    return list(order).index(truth_index) + 1


def ndcg_from_rank(r: int, k: int) -> float:
    return 1.0 / math.log2(r + 1) if r <= k else 0.0


def hit_from_rank(r: int, k: int) -> float:
    return 1.0 if r <= k else 0.0


def ndcg_at_k(ranked, truth_index: int, k: int) -> float:
    """Single-relevant NDCG: the ideal DCG is 1."""
    return ndcg_from_rank(_rank(ranked, truth_index), k)


def hit_at_k(ranked, truth_index: int, k: int) -> float:
    return hit_from_rank(_rank(ranked, truth_index), k)


# ---------------------------------------------------------------- baselines


class BM25Index:
    """Okapi BM25 with Lucene idf; document statistics come from catalog titles."""

    def __init__(self, titles: Mapping[str, str], k1: float = 1.2, b: float = 0.75):
        self.k1, self.b = k1, b
        self.docs = {i: Counter(tokenize(t)) for i, t in titles.items()}
        self.n_docs = len(self.docs)
        lengths = [sum(c.values()) for c in self.docs.values()]
        self.avgdl = float(np.mean(lengths)) if lengths else 0.0
        self.df: Counter = Counter()
        for c in self.docs.values():
            self.df.update(c.keys())

    @classmethod
    def from_catalog(cls, catalog: ItemCatalog, **kw) -> "BM25Index":
        return cls({i: rec.title for i, rec in catalog.items.items()}, **kw)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query: Counter, item_id: str) -> float:
        doc = self.docs.get(item_id)
        if not doc or self.avgdl == 0:
            return 0.0
        dl = sum(doc.values())
        norm = self.k1 * (1 - self.b + self.b * dl / self.avgdl)
        total = 0.0
        for term, qtf in query.items():
            tf = doc.get(term, 0)
            if tf:
                total += qtf * self.idf(term) * tf * (self.k1 + 1) / (tf + norm)
        return total


@dataclass
class BaselineIndices:
    item_freq: Optional[Mapping[str, int]] = None
    stats: Optional[CooccurrenceStats] = None
    table: Optional[EmbeddingTable] = None
    bm25: Optional[BM25Index] = None
    catalog: Optional[ItemCatalog] = None

    @classmethod
    def build(cls, split: Optional[SplitCorpus] = None, stats=None, table=None, catalog=None) -> "BaselineIndices":
        return cls(
            split.train_item_freq if split is not None else None,
            stats,
            table,
            BM25Index.from_catalog(catalog) if catalog is not None else None,
            catalog,
        )


def _require(obj, method: str, what: str):
    if obj is None:
        raise MissingIndex(f"baseline {method} needs {what}")
    return obj


def _cf_row(stats: CooccurrenceStats, item: str) -> dict[str, float]:
    if item not in stats.index:
        return {}
    cols, vals = stats.row_scores(stats.index[item])
    return {stats.item_ids[c]: float(v) for c, v in zip(cols, vals)}


def baseline_scores(task: RankingTask, method: str, indices: BaselineIndices) -> np.ndarray:
    cands = task.candidates
    if method == "pop":
        freq = _require(indices.item_freq, method, "train item frequencies")
        return np.array([float(freq.get(c, 0)) for c in cands])
    if method == "item_cf":
        stats = _require(indices.stats, method, "co-occurrence stats")
        total = np.zeros(len(cands))
        for h in task.history:
            row = _cf_row(stats, h)
            total += [row.get(c, 0.0) for c in cands]
        return total
    if method == "bm25":
        bm25 = _require(indices.bm25, method, "a BM25 index")
        catalog = _require(indices.catalog, method, "a catalog")
        query: Counter = Counter()
        for h in task.history:
            query.update(tokenize(catalog.title(h)))
        return np.array([bm25.score(query, c) for c in cands])
    if method == "mf":
        table = _require(indices.table, method, "an embedding table")
        return candidate_scores(table, user_vector(table, task), cands)
    if method == "recency_tiebreak":
        stats = _require(indices.stats, method, "co-occurrence stats")
        row = _cf_row(stats, task.history[-1]) if task.history else {}
        return np.array([row.get(c, 0.0) for c in cands])
    raise ValueError(f"unknown baseline {method!r}")


def rank_baseline(task: RankingTask, method: str, indices: BaselineIndices) -> RankedList:
    """Order candidates by a non-LLM score; ties keep the original order.

    ``recency_tiebreak`` scores by relevance to the most recent history item
    and breaks ties by popularity before falling back to candidate order.
    """
    scores = baseline_scores(task, method, indices)
    n = len(task.candidates)
    if method == "recency_tiebreak":
        freq = _require(indices.item_freq, method, "train item frequencies")
        pop = [freq.get(c, 0) for c in task.candidates]
        order = sorted(range(n), key=lambda k: (-scores[k], -pop[k], k))
    else:
        order = sorted(range(n), key=lambda k: (-scores[k], k))
    return RankedList(tuple(order), {"method": method})


# ------------------------------------------------------------------ reports


@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)
    ks: tuple[int, ...] = DEFAULT_KS
    skipped: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.records)

    def values(self, metric: str) -> np.ndarray:
        kind, k = metric.split("@")
        fn = ndcg_from_rank if kind.lower() == "ndcg" else hit_from_rank
        return np.array([fn(r["rank_of_truth"], int(k)) for r in self.records])

    def metric_names(self) -> list[str]:
        return [f"ndcg@{k}" for k in self.ks] + [f"hr@{k}" for k in self.ks]

    @property
    def aggregates(self) -> dict[str, float]:
        if not self.records:
            return {m: float("nan") for m in self.metric_names()}
        return {m: float(self.values(m).mean()) for m in self.metric_names()}

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "skipped": self.skipped,
            "ks": list(self.ks),
            "aggregates": {m: (None if math.isnan(v) else v) for m, v in self.aggregates.items()},
            "flags": list(self.flags),
            "records": self.records,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(list(d["records"]), tuple(d["ks"]), int(d.get("skipped", 0)), list(d.get("flags", [])))

    def to_table(self, label: str = "") -> str:
        agg = self.aggregates
        cols = [f"N@{k}" for k in self.ks] + [f"HR@{k}" for k in self.ks]
        vals = [agg[f"ndcg@{k}"] for k in self.ks] + [agg[f"hr@{k}"] for k in self.ks]
        width = max(len(label), 6)
        head = f"{'':<{width}}  " + "  ".join(f"{c:>7}" for c in cols) + f"  {'n':>6}"
        row = f"{label:<{width}}  " + "  ".join(f"{v:>7.4f}" for v in vals) + f"  {self.n:>6}"
        return head + "\n" + row + "\n"

    def to_tsv(self) -> str:
        fields = ["user", "strategy", "variant", "truth_item", "rank_of_truth"]
        lines = ["\t".join(fields)]
        lines += ["\t".join(str(r.get(f, "")) for f in fields) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, json_path: Union[str, Path], table_path=None, tsv_path=None, label: str = "") -> None:
        Path(json_path).write_text(self.to_json() + "\n", encoding="utf-8")
        if table_path is not None:
            Path(table_path).write_text(self.to_table(label), encoding="utf-8")
        if tsv_path is not None:
            Path(tsv_path).write_text(self.to_tsv(), encoding="utf-8")


def evaluate_run(
    tasks: Sequence[RankingTask],
    rankings: Union[Sequence[Optional[RankedList]], Mapping[str, RankedList]],
    ks: Iterable[int] = DEFAULT_KS,
    variant: str = "",
) -> MetricReport:
    """Per-sample ranks plus means. Tasks without a ranking count as skipped."""
    if isinstance(rankings, Mapping):
        rankings = [rankings.get(t.user_id) for t in tasks]
    if len(rankings) != len(tasks):
        raise ValueError("one ranking per task expected")
    records, skipped = [], 0
    for task, ranked in zip(tasks, rankings):
        if ranked is None:
            skipped += 1
            continue
        records.append({
            "user": task.user_id,
            "strategy": task.sampling_strategy,
            "variant": variant,
            "truth_item": task.truth_item,
            "rank_of_truth": _rank(ranked, task.truth_index),
        })
    return MetricReport(records, tuple(sorted(set(ks))), skipped)


# ------------------------------------------------------------------- groups

AXES = ("item_popularity", "history_length")


@dataclass
class GroupingSpec:
    axis: str = "item_popularity"
    boundary: Optional[float] = None  # None means the median of the axis values

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}")


@dataclass
class GroupReport:
    low: MetricReport
    high: MetricReport
    boundary: float
    axis: str

    @property
    def flags(self) -> list[str]:
        out = []
        if self.low.n == 0:
            out.append("empty_low_group")
        if self.high.n == 0:
            out.append("empty_high_group")
        return out


def axis_values(report: MetricReport, axis: str, split: SplitCorpus) -> np.ndarray:
    if axis == "item_popularity":
        freq = split.train_item_freq
        return np.array([float(freq.get(r["truth_item"], 0)) for r in report.records])
    by_user = split.train.by_user
    return np.array([float(len(by_user.get(r["user"], ()))) for r in report.records])


def group_report(report: MetricReport, spec: GroupingSpec, split: SplitCorpus) -> GroupReport:
    """Low group: value <= boundary; high group: value > boundary."""
    vals = axis_values(report, spec.axis, split)
    boundary = spec.boundary if spec.boundary is not None else (float(np.median(vals)) if len(vals) else 0.0)
    low = [r for r, v in zip(report.records, vals) if v <= boundary]
    high = [r for r, v in zip(report.records, vals) if v > boundary]
    g = GroupReport(MetricReport(low, report.ks), MetricReport(high, report.ks), boundary, spec.axis)
    for rep in (g.low, g.high):
        rep.flags = g.flags
    return g


def paired_ttest(a: MetricReport, b: MetricReport, metric: str = "ndcg@10") -> tuple[float, float]:
    """Paired t-test over samples present in both reports, matched by user."""
    va = dict(zip((r["user"] for r in a.records), a.values(metric)))
    vb = dict(zip((r["user"] for r in b.records), b.values(metric)))
    common = sorted(set(va) & set(vb))
    if len(common) < 2:
        raise ValueError("need at least two paired samples")
    res = sstats.ttest_rel([va[u] for u in common], [vb[u] for u in common])
    return float(res.statistic), float(res.pvalue)
