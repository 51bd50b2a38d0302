"""Per-task knowledge selection (global, history-based and history&candidate-based)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from .cf import CooccurrenceStats, EmbeddingTable, rank_scores, topk_for_item
from .corpus import ItemCatalog, RankingTask
from .errors import MissingIndex
from .kg import ReasoningPath

VARIANTS = (
    "none",
    "item_attr",
    "global_i2i",
    "his_i2i",
    "his_cand_i2i",
    "his_u2i",
    "his_cand_u2i",
    "his_i2i_path",
)

ATTRIBUTE_LABELS = {"year": "Publish year"}

Neighbors = list[tuple[str, float]]


@dataclass
class KnowledgePack:
    variant: str = "none"
    i2i_blocks: list[tuple[str, Neighbors]] = field(default_factory=list)
    u2i_list: Neighbors = field(default_factory=list)
    paths: list[ReasoningPath] = field(default_factory=list)
    attribute_lines: dict[str, str] = field(default_factory=dict)

    def item_ids(self) -> set[str]:
        """Every item the knowledge mentions (anchors excluded)."""
        out = {i for _, block in self.i2i_blocks for i, _ in block}
        out.update(i for i, _ in self.u2i_list)
        return out

    def to_dict(self, user_id: Optional[str] = None) -> dict:
        d = {
            "variant": self.variant,
            "i2i_blocks": [[a, [[i, s] for i, s in block]] for a, block in self.i2i_blocks],
            "u2i_list": [[i, s] for i, s in self.u2i_list],
            "paths": [
                {"nodes": list(p.nodes), "relations": list(p.relations), "score": p.score,
                 "merged": [p.merged[0], list(p.merged[1])] if p.merged else None}
                for p in self.paths
            ],
            "attribute_lines": dict(sorted(self.attribute_lines.items())),
        }
        if user_id is not None:
            d = {"user_id": user_id, **d}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgePack":
        paths = [
            ReasoningPath(tuple(p["nodes"]), tuple(p["relations"]), p.get("score"),
                          (int(p["merged"][0]), tuple(p["merged"][1])) if p.get("merged") else None)
            for p in d.get("paths", [])
        ]
        return cls(
            d.get("variant", "none"),
            [(a, [(i, float(s)) for i, s in block]) for a, block in d.get("i2i_blocks", [])],
            [(i, float(s)) for i, s in d.get("u2i_list", [])],
            paths,
            dict(d.get("attribute_lines", {})),
        )


def select_global_i2i(stats: CooccurrenceStats, m: int = 20) -> KnowledgePack:
    """The ``m`` most relevant item pairs overall; ties by pair id."""
    rel = sp.triu(stats.relevance_matrix(), k=1).tocoo()
    if rel.nnz == 0:
        return KnowledgePack("global_i2i")
    # item index order equals id order, so (row, col) sorts like (i, j)
    order = np.lexsort((rel.col, rel.row, -rel.data))[:m]
    blocks = [
        (stats.item_ids[rel.row[k]], [(stats.item_ids[rel.col[k]], float(rel.data[k]))]) for k in order
    ]
    return KnowledgePack("global_i2i", blocks)


def _anchors(history, h: int) -> list[str]:
    out: list[str] = []
    for item in history[-h:] if h > 0 else ():
        if item not in out:
            out.append(item)
    return out


def _knows(source, item: str) -> bool:
    if isinstance(source, CooccurrenceStats):
        return item in source.index
    return item in source.item_index


def select_history_i2i(
    task: RankingTask, source, h: int = 10, k: int = 3, restrict_to_candidates: bool = False
) -> KnowledgePack:
    """Top-``k`` neighbours of each of the last ``h`` history items.

    With ``restrict_to_candidates`` the neighbours come from the task's
    candidates only. Zero co-occurrence neighbours are dropped and anchors
    left with nothing are omitted.
    """
    pool = task.candidates if restrict_to_candidates else None
    blocks = []
    for anchor in _anchors(task.history, h):
        if not _knows(source, anchor):
            continue
        block = topk_for_item(source, anchor, k, pool=pool)
        if isinstance(source, CooccurrenceStats):
            block = [(i, s) for i, s in block if s > 0]
        if block:
            blocks.append((anchor, block))
    return KnowledgePack("his_cand_i2i" if restrict_to_candidates else "his_i2i", blocks)


def user_vector(table: EmbeddingTable, task: RankingTask) -> np.ndarray:
    """The stored user vector, or the mean of the history item vectors for unseen users."""
    if table.has_user(task.user_id):
        return table.user_vec(task.user_id)
    rows = [table.item_index[i] for i in task.history if i in table.item_index]
    if not rows:
        return np.zeros(table.dim)
    return table.item_matrix[rows].mean(axis=0)


def candidate_scores(table: EmbeddingTable, vec: np.ndarray, items) -> np.ndarray:
    """Inner products with ``vec``; items missing from the table score -inf."""
    return np.array(
        [float(table.item_matrix[table.item_index[i]] @ vec) if i in table.item_index else -np.inf for i in items]
    )


def select_history_u2i(
    task: RankingTask, table: EmbeddingTable, n: int = 20, restrict_to_candidates: bool = False
) -> KnowledgePack:
    vec = user_vector(table, task)
    if restrict_to_candidates:
        items = sorted(set(task.candidates))
        ranked = rank_scores(items, candidate_scores(table, vec, items))
        return KnowledgePack("his_cand_u2i", u2i_list=ranked)
    seen = set(task.history)
    items = [i for i in table.item_ids if i not in seen]
    ranked = rank_scores(items, table.item_matrix[[table.item_index[i] for i in items]] @ vec if items else [], n)
    return KnowledgePack("his_u2i", u2i_list=ranked)


def attribute_line(catalog: ItemCatalog, item_id: str, labels: Optional[dict] = None) -> str:
    """``Title (name: v1|v2, other: v)``, or the bare title without attributes."""
    labels = ATTRIBUTE_LABELS if labels is None else labels
    grouped: dict[str, list[str]] = {}
    for name, value in catalog.attributes(item_id):
        grouped.setdefault(name, []).append(value)
    title = catalog.title(item_id)
    if not grouped:
        return title
    inner = ", ".join(f"{labels.get(name, name)}: {'|'.join(vals)}" for name, vals in grouped.items())
    return f"{title} ({inner})"


def attach_attributes(pack: KnowledgePack, task: RankingTask, catalog: ItemCatalog,
                      labels: Optional[dict] = None) -> KnowledgePack:
    lines = dict(pack.attribute_lines)
    for item in list(task.history) + list(task.candidates):
        lines[item] = attribute_line(catalog, item, labels)
    return replace(pack, attribute_lines=lines)


def attach_paths(pack: KnowledgePack, cache: dict[tuple[str, str], ReasoningPath]) -> KnowledgePack:
    """Append the cached best path for each (anchor, top neighbour) pair."""
    paths = list(pack.paths)
    for anchor, block in pack.i2i_blocks:
        if not block:
            continue
        top = block[0][0]
        if (anchor, top) in cache:
            paths.append(cache[(anchor, top)])
        elif (top, anchor) in cache:
            paths.append(cache[(top, anchor)].reversed())
    return replace(pack, variant="his_i2i_path", paths=paths)


@dataclass
class KnowledgeParams:
    history_window: int = 10
    i2i_k: int = 3
    u2i_n: int = 20
    global_m: int = 20
    his_i2i_source: str = "cooccurrence"
    with_attributes: bool = False


def build_pack(
    variant: str,
    task: RankingTask,
    *,
    stats: Optional[CooccurrenceStats] = None,
    table: Optional[EmbeddingTable] = None,
    catalog: Optional[ItemCatalog] = None,
    path_cache: Optional[dict] = None,
    params: KnowledgeParams = KnowledgeParams(),
    global_pack: Optional[KnowledgePack] = None,
) -> KnowledgePack:
    """Assemble the knowledge for one task and variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")

    def need(obj, what):
        if obj is None:
            raise MissingIndex(f"variant {variant} needs {what}")
        return obj

    i2i_source = table if params.his_i2i_source == "embedding" else stats
    if variant == "none":
        pack = KnowledgePack("none")
    elif variant == "item_attr":
        pack = attach_attributes(KnowledgePack("item_attr"), task, need(catalog, "a catalog"))
    elif variant == "global_i2i":
        pack = global_pack or select_global_i2i(need(stats, "co-occurrence stats"), params.global_m)
    elif variant == "his_i2i":
        pack = select_history_i2i(task, need(i2i_source, "an I2I source"), params.history_window, params.i2i_k)
    elif variant == "his_cand_i2i":
        pack = select_history_i2i(task, need(stats, "co-occurrence stats"), params.history_window, params.i2i_k, True)
    elif variant == "his_u2i":
        pack = select_history_u2i(task, need(table, "an embedding table"), params.u2i_n)
    elif variant == "his_cand_u2i":
        pack = select_history_u2i(task, need(table, "an embedding table"), params.u2i_n, True)
    else:
        base = select_history_i2i(task, need(i2i_source, "an I2I source"), params.history_window, params.i2i_k)
        pack = attach_paths(base, path_cache or {})
    if params.with_attributes and variant != "item_attr" and catalog is not None:
        pack = attach_attributes(pack, task, catalog)
    return pack


def write_packs(rows: list[tuple[str, KnowledgePack]], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for user_id, pack in rows:
            f.write(json.dumps(pack.to_dict(user_id), ensure_ascii=False) + "\n")


def read_packs(path: Union[str, Path]) -> dict[tuple[str, str], KnowledgePack]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out[(d["user_id"], d["variant"])] = KnowledgePack.from_dict(d)
    return out
