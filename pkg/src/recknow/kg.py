"""Domain knowledge graph, entity linking and reasoning-path extraction."""
from __future__ import annotations

import json
import logging
import re
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS, TfidfVectorizer

from .cf import CooccurrenceStats, item_relevance
from .corpus import InteractionLog, ItemCatalog
from .errors import NoPaths, NoPositivePairs, UnknownItem

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
CO_CLICK = "co_click"
END = "<end>"
UNK = "<unk>"
NODE_TYPES = ("item", "attr", "ent")

_SPLIT = re.compile(r"[\W_]+")
_TRAILING_YEAR = re.compile(r"\s*\(\d{4}\)\s*$")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop English stopwords."""
    return [t for t in _SPLIT.split(text.lower()) if t and t not in ENGLISH_STOP_WORDS]


def item_node(item_id: str) -> str:
    return f"item:{item_id}"


def attr_node(name: str, value: str) -> str:
    return f"attr:{name}:{value}"


def ent_node(entity_id: str) -> str:
    return f"ent:{entity_id}"


def node_type(node: str) -> str:
    return node.split(":", 1)[0]


def node_item(node: str) -> str:
    if not node.startswith("item:"):
        raise ValueError(f"{node} is not an item node")
    return node[5:]


def inverse_relation(rel: str) -> str:
    if rel == CO_CLICK:
        return rel
    if rel.startswith("has_"):
        return rel[4:] + "_of"
    if rel.endswith("_of"):
        return "has_" + rel[:-3]
    return rel + "_of"


# ------------------------------------------------------------ external KG


@dataclass
class ExternalKG:
    triples: list[tuple[str, str, str]]
    labels: dict[str, str]

    @classmethod
    def read(cls, triples_path: PathLike, labels_path: PathLike) -> "ExternalKG":
        triples = []
        with open(triples_path, encoding="utf-8") as f:
            for line in f:
                parts = line.rstrip("\n").split("\t")
                if len(parts) == 3 and all(parts):
                    triples.append((parts[0], parts[1], parts[2]))
        labels = {}
        with open(labels_path, encoding="utf-8") as f:
            for line in f:
                parts = line.rstrip("\n").split("\t", 1)
                if len(parts) == 2 and parts[0]:
                    labels[parts[0]] = parts[1]
        return cls(triples, labels)


@dataclass(frozen=True)
class Link:
    entity_id: str
    score: float


def link_entities(catalog: ItemCatalog, external_kg: ExternalKG, threshold: float = 0.7) -> dict[str, Link]:
    """Link each item to its best TF-IDF cosine match among entity labels.

    Titles lose a trailing ``(yyyy)`` before matching. A link is kept only
    when the best score reaches ``threshold``; ties go to the smallest
    entity id.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    ent_ids = sorted(external_kg.labels)
    item_ids = sorted(catalog.items)
    if not ent_ids or not item_ids:
        return {}
    titles = [_TRAILING_YEAR.sub("", catalog.title(i)) for i in item_ids]
    labels = [external_kg.labels[e] for e in ent_ids]
    vec = TfidfVectorizer(tokenizer=tokenize, lowercase=False, token_pattern=None)
    try:
        vec.fit(titles + labels)
    except ValueError:  # empty vocabulary
        return {}
    sims = (vec.transform(titles) @ vec.transform(labels).T).tocsr()
    links = {}
    for r, item in enumerate(item_ids):
        lo, hi = sims.indptr[r], sims.indptr[r + 1]
        if lo == hi:
            continue
        cols, vals = sims.indices[lo:hi], sims.data[lo:hi]
        best = vals.max()
        # float noise on identical vectors must not block a perfect match
        best = min(float(best), 1.0)
        if best + 1e-12 < threshold:
            continue
        col = int(cols[vals >= vals.max()].min())
        links[item] = Link(ent_ids[col], best)
    return links


def write_links(links: dict[str, Link], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for item in sorted(links):
            f.write(f"{item}\t{links[item].entity_id}\t{links[item].score:.6f}\n")


def read_links(path: PathLike) -> dict[str, Link]:
    links = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                item, ent, score = line.rstrip("\n").split("\t")
                links[item] = Link(ent, float(score))
    return links


# ------------------------------------------------------------------ graph


class KnowledgeGraph:
    """Merged item/attribute/entity graph.

    Explicit edges live in ``adj``; co-click edges are read from the
    co-occurrence counts on demand so dense co-click structure is never
    materialised as Python objects. Linked external entities are merged
    into the item node that links to them.
    """

    def __init__(self, stats: Optional[CooccurrenceStats] = None, min_coclick: int = 1):
        self.adj: dict[str, dict[str, set[str]]] = defaultdict(lambda: defaultdict(set))
        self.labels: dict[str, str] = {}
        self.item_nodes: set[str] = set()
        self.stats = stats
        self.min_coclick = min_coclick
        self._sorted: dict[str, list[tuple[str, list[str]]]] = {}

    # construction
    def add_node(self, node: str, label: str) -> None:
        self.labels.setdefault(node, label)
        if node_type(node) == "item":
            self.item_nodes.add(node)

    def add_edge(self, head: str, rel: str, tail: str) -> None:
        if head == tail:
            return
        self.adj[head][rel].add(tail)
        self.adj[tail][inverse_relation(rel)].add(head)
        self._sorted.clear()

    # queries
    @property
    def nodes(self) -> set[str]:
        return set(self.labels)

    def _coclick_row(self, node: str) -> tuple[np.ndarray, np.ndarray]:
        st = self.stats
        idx = st.index.get(node_item(node)) if st is not None else None
        if idx is None:
            return np.empty(0, dtype=np.int32), np.empty(0, dtype=np.int32)
        lo, hi = st.counts.indptr[idx], st.counts.indptr[idx + 1]
        return st.counts.indices[lo:hi], st.counts.data[lo:hi]

    def coclick_neighbors(self, node: str) -> list[str]:
        if node not in self.item_nodes:
            return []
        cols, vals = self._coclick_row(node)
        out = (item_node(self.stats.item_ids[c]) for c, v in zip(cols, vals) if v >= self.min_coclick)
        return [n for n in out if n in self.item_nodes]

    def has_coclick(self, a: str, b: str) -> bool:
        if a not in self.item_nodes or b not in self.item_nodes or self.stats is None:
            return False
        cols, vals = self._coclick_row(a)
        j = self.stats.index.get(node_item(b))
        if j is None:
            return False
        k = np.searchsorted(cols, j)
        return bool(k < len(cols) and cols[k] == j and vals[k] >= self.min_coclick)

    def relations(self, node: str) -> list[str]:
        rels = set(self.adj.get(node, {}))
        if node in self.item_nodes and self.stats is not None:
            rels.add(CO_CLICK)
        return sorted(rels)

    def neighbors(self, node: str) -> Iterator[tuple[str, str]]:
        """Yield ``(relation, tail)`` sorted by relation, then tail id."""
        for rel in self.relations(node):
            if rel == CO_CLICK and CO_CLICK not in self.adj.get(node, {}):
                yield from ((rel, t) for t in self.coclick_neighbors(node))
            else:
                key = f"{node}\x00{rel}"
                tails = self._sorted.get(key)
                if tails is None:
                    tails = sorted(self.adj[node][rel])
                    self._sorted[key] = tails
                yield from ((rel, t) for t in tails)

    def edge_relations(self, head: str, tail: str) -> list[str]:
        rels = [r for r, ts in self.adj.get(head, {}).items() if tail in ts]
        if self.has_coclick(head, tail) and CO_CLICK not in rels:
            rels.append(CO_CLICK)
        return sorted(rels)

    def has_edge(self, head: str, rel: str, tail: str) -> bool:
        if rel == CO_CLICK and self.has_coclick(head, tail):
            return True
        return tail in self.adj.get(head, {}).get(rel, ())

    def triples(self) -> Iterator[tuple[str, str, str]]:
        for head in sorted(self.labels):
            for rel, tail in self.neighbors(head):
                yield head, rel, tail

    def n_edges(self) -> int:
        return sum(1 for _ in self.triples())

    def label(self, node: str) -> str:
        return self.labels.get(node, node.split(":", 1)[-1])

    def relation_vocab(self) -> list[str]:
        rels = {r for d in self.adj.values() for r in d}
        if self.stats is not None:
            rels.add(CO_CLICK)
        return sorted(rels)


def build_domain_graph(
    catalog: ItemCatalog,
    train: Optional[InteractionLog] = None,
    links: Optional[dict[str, Link]] = None,
    external_kg: Optional[ExternalKG] = None,
    stats: Optional[CooccurrenceStats] = None,
    hops: int = 2,
    min_coclick: int = 1,
) -> KnowledgeGraph:
    """Merge attribute edges, co-click edges and linked external neighbourhoods.

    ``train`` only restricts item nodes to items that occur in it when
    given; co-click edges come from ``stats``.
    """
    g = KnowledgeGraph(stats, min_coclick)
    allowed = set(train.items) if train is not None else None
    for item_id in sorted(catalog.items):
        if allowed is not None and item_id not in allowed and (stats is None or item_id not in stats.index):
            continue
        node = item_node(item_id)
        g.add_node(node, catalog.title(item_id))
        for name, value in catalog.attributes(item_id):
            a = attr_node(name, value)
            g.add_node(a, value)
            g.add_edge(node, f"has_{name}", a)

    if links and external_kg is not None:
        out_edges: dict[str, list[tuple[str, str]]] = defaultdict(list)
        in_edges: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for h, r, t in external_kg.triples:
            out_edges[h].append((r, t))
            in_edges[t].append((r, h))
        owners: dict[str, list[str]] = defaultdict(list)
        for item_id, link in links.items():
            if item_node(item_id) in g.item_nodes:
                owners[link.entity_id].append(item_node(item_id))

        def resolve(ent: str) -> list[str]:
            return owners.get(ent) or [ent_node(ent)]

        for root in sorted(owners):
            frontier, seen = [root], {root}
            for _ in range(hops):
                nxt = []
                for e in frontier:
                    for r, t in out_edges.get(e, ()):
                        for h_node in resolve(e):
                            for t_node in resolve(t):
                                if node_type(t_node) == "ent":
                                    g.add_node(t_node, external_kg.labels.get(t, t))
                                g.add_edge(h_node, r, t_node)
                        if t not in seen:
                            seen.add(t)
                            nxt.append(t)
                    for r, h in in_edges.get(e, ()):
                        for h_node in resolve(h):
                            if node_type(h_node) == "ent":
                                g.add_node(h_node, external_kg.labels.get(h, h))
                            for e_node in resolve(e):
                                g.add_edge(h_node, r, e_node)
                        if h not in seen:
                            seen.add(h)
                            nxt.append(h)
                frontier = nxt
    return g


# ------------------------------------------------------------------ paths


@dataclass(frozen=True)
class ReasoningPath:
    nodes: tuple[str, ...]
    relations: tuple[str, ...]
    score: Optional[float] = None
    # (position, extra interior nodes) for parallel paths differing only there
    merged: Optional[tuple[int, tuple[str, ...]]] = None

    def __len__(self) -> int:
        return len(self.relations)

    def with_score(self, score: float) -> "ReasoningPath":
        return ReasoningPath(self.nodes, self.relations, float(score), self.merged)

    def reversed(self) -> "ReasoningPath":
        merged = None
        if self.merged is not None:
            merged = (len(self.nodes) - 1 - self.merged[0], self.merged[1])
        return ReasoningPath(
            self.nodes[::-1], tuple(inverse_relation(r) for r in self.relations[::-1]), self.score, merged
        )

    def replays_in(self, g: KnowledgeGraph) -> bool:
        return all(g.has_edge(h, r, t) for h, r, t in zip(self.nodes, self.relations, self.nodes[1:]))


def enumerate_paths(
    g: KnowledgeGraph, i: str, j: str, max_len: int = 3, max_paths: int = 64
) -> list[ReasoningPath]:
    """Simple paths from item ``i`` to item ``j`` with at most ``max_len`` edges.

    Depth-first in (relation, neighbour id) order, stopping after
    ``max_paths`` paths. The direct co-click edge between the pair is
    skipped.
    """
    src, dst = item_node(i), item_node(j)
    if i == j:
        raise ValueError("path endpoints must differ")
    for n, raw in ((src, i), (dst, j)):
        if n not in g.item_nodes:
            raise UnknownItem(raw)
    out: list[ReasoningPath] = []
    nodes, rels = [src], []
    visited = {src}

    def emit(rel: str) -> bool:
        if not rels and rel == CO_CLICK:
            return False
        out.append(ReasoningPath(tuple(nodes) + (dst,), tuple(rels) + (rel,)))
        return len(out) >= max_paths

    def dfs(node: str, budget: int) -> bool:
        if budget == 1:
            for rel in g.edge_relations(node, dst):
                if emit(rel):
                    return True
            return False
        for rel, nxt in g.neighbors(node):
            if nxt == dst:
                if emit(rel):
                    return True
                continue
            if nxt in visited:
                continue
            visited.add(nxt)
            nodes.append(nxt)
            rels.append(rel)
            done = dfs(nxt, budget - 1)
            nodes.pop()
            rels.pop()
            visited.discard(nxt)
            if done:
                return True
        return False

    if max_len >= 1 and max_paths > 0:
        dfs(src, max_len)
    return out


# ----------------------------------------------------------------- scorer


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


@dataclass
class ScorerConfig:
    dim: int = 16
    n_buckets: int = 256
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    neg_ratio: int = 1
    seed: int = 0
    max_len: int = 3
    max_paths: int = 64
    max_positive_pairs: int = 2000
    init_std: float = 0.1


@dataclass
class PathScorer:
    """Mean-pooled step embeddings mapped to a path score by one affine layer.

    Each step embeds the entity's type, a hashed id bucket and the relation
    leaving it (``<end>`` for the final entity).
    """

    relations: list[str]
    type_emb: np.ndarray
    bucket_emb: np.ndarray
    rel_emb: np.ndarray
    w: np.ndarray
    b: float
    seed: int = 0
    trained: bool = False
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.rel_index = {r: k for k, r in enumerate(self.relations)}

    @classmethod
    def init(cls, relations: Iterable[str], config: ScorerConfig = ScorerConfig()) -> "PathScorer":
        vocab = sorted(set(relations) | {END, UNK})
        rng = np.random.default_rng(config.seed)
        d = config.dim
        return cls(
            vocab,
            rng.normal(0, config.init_std, (len(NODE_TYPES), d)),
            rng.normal(0, config.init_std, (config.n_buckets, d)),
            rng.normal(0, config.init_std, (len(vocab), d)),
            rng.normal(0, config.init_std, d),
            0.0,
            config.seed,
        )

    @property
    def n_buckets(self) -> int:
        return self.bucket_emb.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"type_emb": self.type_emb, "bucket_emb": self.bucket_emb, "rel_emb": self.rel_emb,
                "w": self.w, "b": np.array([self.b])}

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        self.type_emb, self.bucket_emb, self.rel_emb, self.w = p["type_emb"], p["bucket_emb"], p["rel_emb"], p["w"]
        self.b = float(np.asarray(p["b"]).reshape(-1)[0])

    def encode(self, path: ReasoningPath) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        types = np.array([NODE_TYPES.index(node_type(n)) for n in path.nodes])
        buckets = np.array([zlib.crc32(n.encode("utf-8")) % self.n_buckets for n in path.nodes])
        rels = [self.rel_index.get(r, self.rel_index[UNK]) for r in path.relations] + [self.rel_index[END]]
        return types, buckets, np.array(rels)

    def path_score(self, path: ReasoningPath) -> float:
        t, bk, r = self.encode(path)
        h = (self.type_emb[t] + self.bucket_emb[bk] + self.rel_emb[r]).mean(axis=0)
        return float(h @ self.w + self.b)

    def scores(self, paths: Iterable[ReasoningPath]) -> np.ndarray:
        return np.array([self.path_score(p) for p in paths], dtype=float)

    def save(self, path: PathLike) -> None:
        np.savez(path, relations=np.array(self.relations), type_emb=self.type_emb, bucket_emb=self.bucket_emb,
                 rel_emb=self.rel_emb, w=self.w, b=np.array([self.b]), seed=np.array([self.seed]),
                 trained=np.array([self.trained]), loss_history=np.array(self.loss_history, dtype=float))

    @classmethod
    def load(cls, path: PathLike) -> "PathScorer":
        with np.load(path, allow_pickle=False) as z:
            return cls([str(r) for r in z["relations"]], z["type_emb"], z["bucket_emb"], z["rel_emb"], z["w"],
                       float(z["b"][0]), int(z["seed"][0]), bool(z["trained"][0]), z["loss_history"].tolist())


def pair_relevance_kprn(scorer: PathScorer, paths: list[ReasoningPath]) -> float:
    """Sigmoid of the mean path score over all paths connecting a pair."""
    if not paths:
        raise NoPaths("no paths connect the pair")
    return float(_sigmoid(scorer.scores(paths).mean()))


def best_path(scorer: PathScorer, paths: list[ReasoningPath]) -> ReasoningPath:
    """Highest-scoring path; ties go to the shorter path, then smaller node ids."""
    if not paths:
        raise NoPaths("no paths connect the pair")
    scored = [(p, s) for p, s in zip(paths, scorer.scores(paths))]
    p, s = min(scored, key=lambda ps: (-ps[1], len(ps[0]), ps[0].nodes))
    return p.with_score(s)


@dataclass
class PairBatch:
    """Flattened encoding of the paths of a set of item pairs."""

    types: np.ndarray
    buckets: np.ndarray
    rels: np.ndarray
    step_path: np.ndarray
    path_len: np.ndarray
    path_pair: np.ndarray
    pair_npaths: np.ndarray
    labels: np.ndarray


def encode_pairs(scorer: PathScorer, pair_paths: list[list[ReasoningPath]], labels) -> PairBatch:
    types, buckets, rels, step_path, path_len, path_pair, npaths = [], [], [], [], [], [], []
    pid = 0
    for k, paths in enumerate(pair_paths):
        npaths.append(len(paths))
        for p in paths:
            t, bk, r = scorer.encode(p)
            types.append(t)
            buckets.append(bk)
            rels.append(r)
            step_path.append(np.full(len(t), pid))
            path_len.append(len(t))
            path_pair.append(k)
            pid += 1
    cat = lambda xs: np.concatenate(xs) if xs else np.empty(0, dtype=int)  # noqa: E731
    return PairBatch(cat(types), cat(buckets), cat(rels), cat(step_path), np.array(path_len, dtype=float),
                     np.array(path_pair, dtype=int), np.array(npaths, dtype=float), np.asarray(labels, dtype=float))


def loss_and_grad(params: dict[str, np.ndarray], batch: PairBatch, with_grad: bool = True):
    """Summed binary cross-entropy of sigmoid(mean path score) and its gradient."""
    T, B, R, w = params["type_emb"], params["bucket_emb"], params["rel_emb"], params["w"]
    b = float(np.asarray(params["b"]).reshape(-1)[0])
    n_paths, d = len(batch.path_len), len(w)
    steps = T[batch.types] + B[batch.buckets] + R[batch.rels]
    h = np.zeros((n_paths, d))
    np.add.at(h, batch.step_path, steps)
    h /= batch.path_len[:, None]
    s = h @ w + b
    z = np.bincount(batch.path_pair, weights=s, minlength=len(batch.labels)) / batch.pair_npaths
    y = batch.labels
    loss = float(np.sum(y * np.logaddexp(0.0, -z) + (1 - y) * np.logaddexp(0.0, z)))
    if not with_grad:
        return loss, None
    gz = _sigmoid(z) - y
    gs = gz[batch.path_pair] / batch.pair_npaths[batch.path_pair]
    grads = {"w": h.T @ gs, "b": np.array([gs.sum()])}
    gstep = (gs / batch.path_len)[batch.step_path][:, None] * w[None, :]
    for name, idx, shape in (("type_emb", batch.types, T.shape), ("bucket_emb", batch.buckets, B.shape),
                             ("rel_emb", batch.rels, R.shape)):
        g = np.zeros(shape)
        np.add.at(g, idx, gstep)
        grads[name] = g
    return loss, grads


def _labelled_pairs(stats: CooccurrenceStats, items: list[str], theta: float, config: ScorerConfig, rng):
    allowed = set(items)
    positives = [(i, j) for i, j, _ in stats.pairs()
                 if i in allowed and j in allowed and item_relevance(stats, i, j) > theta]
    if not positives:
        raise NoPositivePairs(f"no item pair has relevance above {theta}")
    if len(positives) > config.max_positive_pairs:
        keep = np.sort(rng.choice(len(positives), config.max_positive_pairs, replace=False))
        positives = [positives[k] for k in keep]
    pos_set = set(positives)
    n_items = len(items)
    want = config.neg_ratio * len(positives)
    total_pairs = n_items * (n_items - 1) // 2
    negatives: list[tuple[str, str]] = []

    def is_negative(a: str, b: str) -> bool:
        if (a, b) in pos_set:
            return False
        if a in stats.index and b in stats.index:
            return item_relevance(stats, a, b) <= theta
        return True

    if total_pairs <= 4 * want + 1000:
        pool = [(items[a], items[b]) for a in range(n_items) for b in range(a + 1, n_items)
                if is_negative(items[a], items[b])]
        if len(pool) > want:
            keep = np.sort(rng.choice(len(pool), want, replace=False))
            pool = [pool[k] for k in keep]
        negatives = pool
    else:
        seen: set[tuple[str, str]] = set()
        attempts = 0
        while len(negatives) < want and attempts < 50 * want:
            attempts += 1
            a, b = rng.integers(n_items, size=2)
            if a == b:
                continue
            pair = (items[min(a, b)], items[max(a, b)])
            if pair in seen:
                continue
            seen.add(pair)
            if is_negative(*pair):
                negatives.append(pair)
    return positives, negatives


def train_path_scorer(
    g: KnowledgeGraph, stats: CooccurrenceStats, theta: float = 0.2, config: ScorerConfig = ScorerConfig()
) -> PathScorer:
    """Fit the path scorer on pairs labelled by co-occurrence relevance.

    Pairs scoring above ``theta`` are positives; ``neg_ratio`` sampled pairs
    at or below it per positive are negatives. Pairs with no connecting
    path are dropped. Minimises the summed binary cross-entropy with Adam
    over seeded mini-batches.
    """
    if not 0 < theta < 1:
        raise ValueError("theta must be in (0, 1)")
    rng = np.random.default_rng(config.seed)
    scorer = PathScorer.init(g.relation_vocab(), config)
    items = sorted(node_item(n) for n in g.item_nodes)
    positives, negatives = _labelled_pairs(stats, items, theta, config, rng)
    pair_paths, labels = [], []
    for label, pairs in ((1.0, positives), (0.0, negatives)):
        for i, j in pairs:
            paths = enumerate_paths(g, i, j, config.max_len, config.max_paths)
            if paths:
                pair_paths.append(paths)
                labels.append(label)
    if not any(labels):
        raise NoPositivePairs("no positive pair is connected by a path")
    full = encode_pairs(scorer, pair_paths, labels)
    params = {k: v.astype(float).copy() for k, v in scorer.params().items()}
    history = [loss_and_grad(params, full, with_grad=False)[0]]
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps, step = 0.9, 0.999, 1e-8, 0
    n = len(labels)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = encode_pairs(scorer, [pair_paths[k] for k in idx], [labels[k] for k in idx])
            _, grads = loss_and_grad(params, batch)
            step += 1
            for k in params:
                gk = grads[k] / len(idx)
                m[k] = beta1 * m[k] + (1 - beta1) * gk
                v2[k] = beta2 * v2[k] + (1 - beta2) * gk * gk
                mhat = m[k] / (1 - beta1 ** step)
                vhat = v2[k] / (1 - beta2 ** step)
                params[k] = params[k] - config.lr * mhat / (np.sqrt(vhat) + eps)
        history.append(loss_and_grad(params, full, with_grad=False)[0])
    scorer.set_params(params)
    scorer.trained = config.epochs > 0
    scorer.loss_history = history
    logger.info("path scorer: %d pairs, loss %.4f -> %.4f", n, history[0], history[-1])
    return scorer


# -------------------------------------------------------- best-path cache


def merge_parallel(best: ReasoningPath, paths: list[ReasoningPath]) -> ReasoningPath:
    """Fold paths that differ from ``best`` at one interior attribute or entity node into it."""
    by_pos: dict[int, list[str]] = defaultdict(list)
    for p in paths:
        if p.relations != best.relations or p.nodes == best.nodes:
            continue
        diff = [k for k, (a, b) in enumerate(zip(p.nodes, best.nodes)) if a != b]
        if len(diff) != 1 or node_type(best.nodes[diff[0]]) == "item":
            continue
        if p.nodes[diff[0]] not in by_pos[diff[0]]:
            by_pos[diff[0]].append(p.nodes[diff[0]])
    if not by_pos:
        return best
    pos = min(by_pos, key=lambda k: (-len(by_pos[k]), k))
    return ReasoningPath(best.nodes, best.relations, best.score, (pos, tuple(by_pos[pos])))


def extract_best_paths(
    g: KnowledgeGraph, scorer: PathScorer, pairs: Iterable[tuple[str, str]], max_len: int = 3, max_paths: int = 64
) -> dict[tuple[str, str], ReasoningPath]:
    cache = {}
    for i, j in pairs:
        if (i, j) in cache or i == j:
            continue
        if item_node(i) not in g.item_nodes or item_node(j) not in g.item_nodes:
            continue
        paths = enumerate_paths(g, i, j, max_len, max_paths)
        if paths:
            cache[(i, j)] = merge_parallel(best_path(scorer, paths), paths)
    return cache


def write_path_cache(cache: dict[tuple[str, str], ReasoningPath], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for (i, j) in sorted(cache):
            p = cache[(i, j)]
            row = {"pair": [i, j], "nodes": list(p.nodes), "relations": list(p.relations), "score": p.score,
                   "merged": [p.merged[0], list(p.merged[1])] if p.merged else None}
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_path_cache(path: PathLike) -> dict[tuple[str, str], ReasoningPath]:
    cache = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            merged = (int(row["merged"][0]), tuple(row["merged"][1])) if row.get("merged") else None
            cache[tuple(row["pair"])] = ReasoningPath(tuple(row["nodes"]), tuple(row["relations"]), row["score"], merged)
    return cache
