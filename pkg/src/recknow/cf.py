"""Collaborative-filtering relevance: co-occurrence counts, BPR-style MF and exact top-k."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np
import scipy.sparse as sp

from . import _core
from .corpus import InteractionLog
from .errors import DivergedTraining, SelfPair, UnknownItem, UnknownKey

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class CooccurrenceStats:
    """Distinct-user click counts per item and per unordered item pair.

    ``counts`` is a symmetric CSR matrix over ``item_ids`` (sorted) with an
    empty diagonal.
    """

    item_ids: list[str]
    freq: np.ndarray
    counts: sp.csr_matrix

    def __post_init__(self):
        self.index = {i: k for k, i in enumerate(self.item_ids)}

    def _idx(self, item_id: str) -> int:
        try:
            return self.index[item_id]
        except KeyError:
            raise UnknownItem(item_id) from None

    def item_freq(self, item_id: str) -> int:
        return int(self.freq[self._idx(item_id)])

    def pair_count(self, i: str, j: str) -> int:
        a, b = self._idx(i), self._idx(j)
        if a == b:
            raise SelfPair(i)
        return int(self.counts[a, b])

    def pairs(self) -> Iterator[tuple[str, str, int]]:
        """Yield ``(i, j, count)`` with ``i < j`` for every co-clicked pair."""
        upper = sp.triu(self.counts, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        for r, c, v in zip(upper.row[order], upper.col[order], upper.data[order]):
            yield self.item_ids[r], self.item_ids[c], int(v)

    def row_scores(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and relevance scores of the nonzero pairs of one item."""
        lo, hi = self.counts.indptr[idx], self.counts.indptr[idx + 1]
        cols = self.counts.indices[lo:hi]
        vals = self.counts.data[lo:hi].astype(float)
        return cols, vals / np.sqrt(float(self.freq[idx]) * self.freq[cols])

    def relevance_matrix(self) -> sp.csr_matrix:
        """All pairwise co-occurrence relevances as a sparse matrix."""
        C = self.counts.tocoo()
        data = C.data / np.sqrt(self.freq[C.row].astype(float) * self.freq[C.col])
        return sp.csr_matrix((data, (C.row, C.col)), shape=C.shape)


def count_cooccurrence(train: InteractionLog, items: Optional[Iterable[str]] = None) -> CooccurrenceStats:
    """Count co-clicks over each user's full train history.

    A user contributes at most once to an item's frequency and at most once
    to each pair, however often they repeat a click. ``items`` widens the
    item universe (e.g. to items only seen in held-out data); such items get
    frequency zero.
    """
    item_ids = sorted(set(train.items) | set(items or ()))
    index = {i: k for k, i in enumerate(item_ids)}
    users = train.users
    indptr = [0]
    indices: list[int] = []
    for u in users:
        row = sorted({index[x.item_id] for x in train.by_user[u]})
        indices.extend(row)
        indptr.append(len(indices))
    u_indptr = np.asarray(indptr, dtype=np.int32)
    u_indices = np.asarray(indices, dtype=np.int32)
    n_items = len(item_ids)
    X = sp.csr_matrix(
        (np.ones(len(u_indices), dtype=np.int32), u_indices, u_indptr), shape=(len(users), n_items)
    )
    XT = X.T.tocsr()
    XT.sort_indices()
    freq = np.diff(XT.indptr).astype(np.int64)
    ip, ix, val = _core.cooccurrence_csr(
        u_indptr, u_indices, XT.indptr.astype(np.int32), XT.indices.astype(np.int32), n_items
    )
    counts = sp.csr_matrix((val, ix, ip), shape=(n_items, n_items))
    return CooccurrenceStats(item_ids, freq, counts)


def item_relevance(stats: CooccurrenceStats, i: str, j: str) -> float:
    """co-occur(i, j) / sqrt(N_i * N_j); 0.0 for pairs never co-clicked."""
    if i == j:
        raise SelfPair(i)
    c = stats.pair_count(i, j)
    if c == 0:
        return 0.0
    return c / math.sqrt(stats.item_freq(i) * stats.item_freq(j))


# ---------------------------------------------------------------- MF


@dataclass
class MFConfig:
    dim: int = 32
    epochs: int = 20
    lr: float = 0.05
    reg: float = 1e-4
    neg_per_pos: int = 1
    seed: int = 0
    init_std: float = 0.1


@dataclass
class EmbeddingTable:
    dim: int
    user_ids: list[str]
    user_matrix: np.ndarray
    item_ids: list[str]
    item_matrix: np.ndarray
    provenance: str = "trained_mf"
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.user_index = {u: k for k, u in enumerate(self.user_ids)}
        self.item_index = {i: k for k, i in enumerate(self.item_ids)}
        for m in (self.user_matrix, self.item_matrix):
            if m.size and (m.ndim != 2 or m.shape[1] != self.dim):
                raise ValueError("embedding matrices must have shape (n, dim)")
            if not np.all(np.isfinite(m)):
                raise ValueError("embeddings must be finite")

    def has_user(self, user_id: str) -> bool:
        return user_id in self.user_index

    def user_vec(self, user_id: str) -> np.ndarray:
        try:
            return self.user_matrix[self.user_index[user_id]]
        except KeyError:
            raise UnknownKey(user_id) from None

    def item_vec(self, item_id: str) -> np.ndarray:
        try:
            return self.item_matrix[self.item_index[item_id]]
        except KeyError:
            raise UnknownKey(item_id) from None

    def scaled(self, factor: float) -> "EmbeddingTable":
        return EmbeddingTable(
            self.dim, self.user_ids, self.user_matrix * factor, self.item_ids,
            self.item_matrix * factor, self.provenance,
        )


def _sample_negatives(rng, users, n_items, pos_keys):
    neg = rng.integers(n_items, size=len(users))
    bad = np.isin(users * n_items + neg, pos_keys)
    while bad.any():
        neg[bad] = rng.integers(n_items, size=int(bad.sum()))
        bad = np.isin(users * n_items + neg, pos_keys)
    return neg


def train_mf(
    train: InteractionLog, config: MFConfig = MFConfig(), items: Optional[Iterable[str]] = None
) -> EmbeddingTable:
    """Fit user/item vectors with the pairwise logistic loss on sampled triples.

    Each epoch visits every distinct (user, item) positive ``neg_per_pos``
    times in a seeded order, pairing it with a uniformly drawn item the user
    never clicked in train.
    """
    if config.dim < 1:
        raise ValueError("dim must be >= 1")
    user_ids = train.users
    item_ids = sorted(set(train.items) | set(items or ()))
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    n_items = len(item_ids)
    keys = np.unique(
        np.fromiter((uidx[x.user_id] * n_items + iidx[x.item_id] for x in train), dtype=np.int64)
    )
    pos_u, pos_i = keys // n_items, keys % n_items
    # users who clicked everything have no negatives
    full = np.bincount(pos_u, minlength=len(user_ids)) >= n_items
    if full.any():
        keep = ~full[pos_u]
        pos_u, pos_i = pos_u[keep], pos_i[keep]

    rng = np.random.default_rng(config.seed)
    U = rng.normal(0.0, config.init_std, size=(len(user_ids), config.dim))
    V = rng.normal(0.0, config.init_std, size=(n_items, config.dim))
    history: list[float] = []
    for epoch in range(config.epochs):
        order = np.concatenate([rng.permutation(len(pos_u)) for _ in range(config.neg_per_pos)])
        users = np.ascontiguousarray(pos_u[order], dtype=np.int64)
        pos = np.ascontiguousarray(pos_i[order], dtype=np.int64)
        neg = np.ascontiguousarray(_sample_negatives(rng, users, n_items, keys), dtype=np.int64)
        total = _core.bpr_epoch(U, V, users, pos, neg, config.lr, config.reg)
        if not (math.isfinite(total) and np.isfinite(U).all() and np.isfinite(V).all()):
            raise DivergedTraining(f"non-finite parameters after epoch {epoch}")
        history.append(total / max(len(users), 1))
        logger.debug("mf epoch %d loss %.5f", epoch, history[-1])
    return EmbeddingTable(config.dim, user_ids, U, item_ids, V, "trained_mf", history)


def embed_relevance(table: EmbeddingTable, left: str, right: str, left_kind: str = "user") -> float:
    """Inner product of ``left`` (a user or an item) with item ``right``."""
    if left_kind == "user":
        a = table.user_vec(left)
    elif left_kind == "item":
        a = table.item_vec(left)
    else:
        raise ValueError(f"left_kind must be 'user' or 'item', not {left_kind!r}")
    return float(np.dot(a, table.item_vec(right)))


# ------------------------------------------------------------- top-k


def rank_scores(ids: list[str], scores: np.ndarray, k: Optional[int] = None) -> list[tuple[str, float]]:
    """Order ``ids`` by descending score then ascending id; keep the first ``k``."""
    n = len(ids)
    if n == 0:
        return []
    k = n if k is None else min(k, n)
    scores = np.asarray(scores, dtype=float)
    sel = np.arange(n)
    if n > 4 * k:
        kth = np.partition(scores, n - k)[n - k]
        sel = np.flatnonzero(scores >= kth)
    id_rank = np.argsort(np.argsort(np.array([ids[s] for s in sel], dtype=object)))
    order = np.lexsort((id_rank, -scores[sel]))[:k]
    return [(ids[sel[o]], float(scores[sel[o]])) for o in order]


def _pool_ids(universe: list[str], index: dict, pool, drop: set) -> list[str]:
    if pool is None:
        return [i for i in universe if i not in drop]
    return sorted({p for p in pool if p not in drop})


def topk_for_item(source, i: str, k: int, pool: Optional[Iterable[str]] = None) -> list[tuple[str, float]]:
    """Top-``k`` neighbours of item ``i`` by co-occurrence or embedding relevance."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(source, CooccurrenceStats):
        if i not in source.index:
            raise UnknownItem(i)
        idx = source.index[i]
        cols, vals = source.row_scores(idx)
        if pool is None:
            dense = np.zeros(len(source.item_ids))
            dense[cols] = vals
            dense = np.delete(dense, idx)
            ids = source.item_ids[:idx] + source.item_ids[idx + 1:]
            return rank_scores(ids, dense, k)
        ids = _pool_ids(source.item_ids, source.index, pool, {i})
        lookup = dict(zip(cols.tolist(), vals.tolist()))
        scores = np.array([lookup.get(source.index.get(p, -1), 0.0) for p in ids])
        return rank_scores(ids, scores, k)
    if isinstance(source, EmbeddingTable):
        v = source.item_vec(i) if i in source.item_index else None
        if v is None:
            raise UnknownItem(i)
        return _rank_by_vector(source, v, k, pool, {i})
    raise TypeError(f"unsupported relevance source {type(source).__name__}")


def _rank_by_vector(table: EmbeddingTable, vec, k, pool, drop) -> list[tuple[str, float]]:
    if pool is None:
        if drop:
            keep = np.array([i not in drop for i in table.item_ids], dtype=bool)
            ids = [i for i in table.item_ids if i not in drop]
            scores = table.item_matrix[keep] @ vec
        else:
            ids, scores = table.item_ids, table.item_matrix @ vec
        return rank_scores(ids, scores, k)
    ids = _pool_ids(table.item_ids, table.item_index, pool, drop)
    missing = [p for p in ids if p not in table.item_index]
    if missing:
        raise UnknownKey(missing[0])
    rows = [table.item_index[p] for p in ids]
    return rank_scores(ids, table.item_matrix[rows] @ vec, k)


def topk_for_user(
    table: EmbeddingTable,
    u: str,
    k: int,
    pool: Optional[Iterable[str]] = None,
    exclude: Iterable[str] = (),
    vector: Optional[np.ndarray] = None,
) -> list[tuple[str, float]]:
    """Top-``k`` items by inner product with user ``u`` (or an explicit ``vector``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    vec = table.user_vec(u) if vector is None else np.asarray(vector, dtype=float)
    return _rank_by_vector(table, vec, k, pool, set(exclude))


# ----------------------------------------------------------------- I/O


def write_embeddings(path: PathLike, ids: list[str], matrix: np.ndarray, kind: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"dim={matrix.shape[1] if matrix.ndim == 2 else 0} kind={kind}\n")
        for key, row in zip(ids, matrix):
            f.write(key + " " + " ".join(format(float(x), ".17g") for x in row) + "\n")


def read_embeddings(path: PathLike) -> tuple[str, int, list[str], np.ndarray]:
    with open(path, encoding="utf-8") as f:
        header = dict(tok.split("=", 1) for tok in f.readline().split())
        dim, kind = int(header["dim"]), header["kind"]
        ids, rows = [], []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}: expected {dim} values for {parts[0]}")
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    matrix = np.asarray(rows, dtype=float).reshape(len(ids), dim)
    return kind, dim, ids, matrix


def save_table(table: EmbeddingTable, user_path: PathLike, item_path: PathLike) -> None:
    write_embeddings(user_path, table.user_ids, table.user_matrix, "user")
    write_embeddings(item_path, table.item_ids, table.item_matrix, "item")


def load_table(item_path: PathLike, user_path: Optional[PathLike] = None, provenance: str = "imported") -> EmbeddingTable:
    kind, dim, item_ids, V = read_embeddings(item_path)
    if kind != "item":
        raise ValueError(f"{item_path} holds {kind} vectors, expected item")
    user_ids: list[str] = []
    U = np.zeros((0, dim))
    if user_path is not None and Path(user_path).exists():
        ukind, udim, user_ids, U = read_embeddings(user_path)
        if ukind != "user" or udim != dim:
            raise ValueError(f"{user_path}: expected user vectors of dim {dim}")
    return EmbeddingTable(dim, user_ids, U, item_ids, V, provenance)


def write_stats(stats: CooccurrenceStats, pairs_path: PathLike, freq_path: PathLike) -> None:
    with open(pairs_path, "w", encoding="utf-8") as f:
        for i, j, c in stats.pairs():
            f.write(f"{i}\t{j}\t{c}\n")
    with open(freq_path, "w", encoding="utf-8") as f:
        for i, n in zip(stats.item_ids, stats.freq.tolist()):
            f.write(f"{i}\t{n}\n")


def read_stats(pairs_path: PathLike, freq_path: PathLike) -> CooccurrenceStats:
    item_ids, freq = [], []
    with open(freq_path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                i, n = line.rstrip("\n").split("\t")
                item_ids.append(i)
                freq.append(int(n))
    order = np.argsort(np.array(item_ids, dtype=object))
    item_ids = [item_ids[k] for k in order]
    freq_arr = np.asarray(freq, dtype=np.int64)[order]
    index = {i: k for k, i in enumerate(item_ids)}
    rows, cols, vals = [], [], []
    with open(pairs_path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                i, j, c = line.rstrip("\n").split("\t")
                a, b = index[i], index[j]
                rows += [a, b]
                cols += [b, a]
                vals += [int(c), int(c)]
    n = len(item_ids)
    counts = sp.csr_matrix((np.asarray(vals, dtype=np.int32), (rows, cols)), shape=(n, n))
    counts.sort_indices()
    return CooccurrenceStats(item_ids, freq_arr, counts)
