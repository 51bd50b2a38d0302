"""Small generated datasets for tests, benchmarks and smoke runs."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .corpus import CatalogRecord, Interaction, InteractionLog, ItemCatalog

_ADJ = ["Crimson", "Silent", "Golden", "Broken", "Hidden", "Wild", "Last", "Frozen", "Electric", "Lonely",
        "Burning", "Distant", "Secret", "Velvet", "Iron", "Paper"]
_NOUN = ["River", "Garden", "Empire", "Harbor", "Mirror", "Voyage", "Kingdom", "Signal", "Forest", "Winter",
         "Machine", "Island", "Letter", "Shadow", "Circus", "Orchard"]
GENRES = ["Action", "Animation", "Comedy", "Drama", "Horror", "Romance", "Sci-Fi", "Thriller"]


def make_titles(n: int, seed: int = 0) -> list[str]:
    """Distinct two-word titles with a release year, in a seeded order."""
    if n > len(_ADJ) * len(_NOUN):
        raise ValueError("not enough distinct titles")
    rng = np.random.default_rng(seed)
    pairs = list(itertools.product(_ADJ, _NOUN))
    picks = rng.permutation(len(pairs))[:n]
    years = rng.integers(1960, 2000, size=n)
    return [f"The {pairs[p][0]} {pairs[p][1]} ({y})" for p, y in zip(picks, years)]


def block_log(
    n_users: int = 400,
    n_items: int = 80,
    n_user_blocks: int = 2,
    n_item_blocks: int = 2,
    per_user: int = 12,
    noise: float = 0.0,
    seed: int = 0,
) -> InteractionLog:
    """Users in block b click items of block b (rank-1 block structure)."""
    rng = np.random.default_rng(seed)
    user_block = np.arange(n_users) % n_user_blocks
    item_block = np.arange(n_items) % n_item_blocks
    rows = []
    for u in range(n_users):
        own = np.flatnonzero(item_block == user_block[u] % n_item_blocks)
        picks = rng.choice(own, size=min(per_user, len(own)), replace=False)
        for t, i in enumerate(picks):
            if noise and rng.random() < noise:
                i = rng.integers(n_items)
            rows.append(Interaction(f"u{u}", f"i{i}", None, t))
    return InteractionLog(rows)


@dataclass
class ToyWorld:
    log: InteractionLog
    catalog: ItemCatalog
    item_genre: dict[str, str]
    triples: list[tuple[str, str, str]]
    labels: dict[str, str]


def genre_world(
    n_users: int = 60,
    n_genres: int = 4,
    items_per_genre: int = 8,
    per_user: int = 8,
    cross_prob: float = 0.0,
    seed: int = 0,
    with_ratings: bool = False,
) -> ToyWorld:
    """Movie-like world: each user sticks to one genre; years are shared across genres.

    The external KG links every item title to a director entity; directors
    work across genres and point to a country entity.
    """
    rng = np.random.default_rng(seed)
    n_items = n_genres * items_per_genre
    titles = make_titles(n_items, seed)
    genres = GENRES[:n_genres]
    item_ids = [str(k + 1) for k in range(n_items)]
    item_genre = {i: genres[k % n_genres] for k, i in enumerate(item_ids)}
    items = {}
    for k, i in enumerate(item_ids):
        year = titles[k][-5:-1]
        items[i] = CatalogRecord(titles[k], (("genre", item_genre[i]), ("year", year)))
    catalog = ItemCatalog(items, ("genre", "year"))

    rows = []
    for u in range(n_users):
        g = genres[u % n_genres]
        own = [i for i in item_ids if item_genre[i] == g]
        picks = list(rng.choice(own, size=min(per_user, len(own)), replace=False))
        for t, i in enumerate(picks):
            if cross_prob and rng.random() < cross_prob:
                i = item_ids[rng.integers(n_items)]
            rating = float(rng.integers(3, 6)) if with_ratings else None
            rows.append(Interaction(str(u + 1), i, rating, 1_000_000 + 60 * t))

    # external KG keyed by Q-ids, labels equal the titles minus the year
    triples, labels = [], {}
    n_directors = max(2, n_genres)
    for d in range(n_directors):
        labels[f"D{d}"] = f"Director {_NOUN[d]}"
    labels["C0"] = "Atlantis"
    for d in range(n_directors):
        triples.append((f"D{d}", "country", "C0"))
    for k, i in enumerate(item_ids):
        q = f"Q{k + 1}"
        labels[q] = titles[k][:-7]
        triples.append((q, "director", f"D{(k // n_genres) % n_directors}"))
    return ToyWorld(InteractionLog(rows), catalog, item_genre, triples, labels)


def write_ml1m_files(world: ToyWorld, root: Union[str, Path]) -> dict[str, Path]:
    """Write ``ratings.dat``/``movies.dat`` and KG TSVs in their on-disk formats."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "ratings": root / "ratings.dat",
        "movies": root / "movies.dat",
        "triples": root / "kg_triples.tsv",
        "labels": root / "kg_labels.tsv",
    }
    with open(paths["ratings"], "w", encoding="latin-1") as f:
        for x in world.log:
            rating = int(x.rating) if x.rating is not None else 5
            f.write(f"{x.user_id}::{x.item_id}::{rating}::{x.timestamp}\n")
    with open(paths["movies"], "w", encoding="latin-1") as f:
        for i in sorted(world.catalog.items, key=int):
            rec = world.catalog.items[i]
            genres = "|".join(v for n, v in rec.attributes if n == "genre")
            f.write(f"{i}::{rec.title}::{genres}\n")
    with open(paths["triples"], "w", encoding="utf-8") as f:
        for h, r, t in world.triples:
            f.write(f"{h}\t{r}\t{t}\n")
    with open(paths["labels"], "w", encoding="utf-8") as f:
        for e in sorted(world.labels):
            f.write(f"{e}\t{world.labels[e]}\n")
    return paths


def random_permutations(n: int, size: int = 20, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.array([rng.permutation(size) for _ in range(n)])


def split_pairs(log: InteractionLog, holdout: float = 0.2, seed: int = 0,
                rng: Optional[np.random.Generator] = None):
    """Random per-event train/held-out split used for AUC checks."""
    rng = rng or np.random.default_rng(seed)
    mask = rng.random(len(log)) < holdout
    train = InteractionLog(x for x, m in zip(log, mask) if not m)
    held = [x for x, m in zip(log, mask) if m]
    return train, held
