"""Shared scenario builders for unit and acceptance tests."""
import time

import numpy as np

from oracles import auc_exhaustive
from recknow.cf import MFConfig, train_mf
from recknow.synthetic import block_log, split_pairs


def mf_block_run(seed=0, dim=8, epochs=20):
    """Train on the 2x2 block dataset; return (table, held-out AUC, seconds)."""
    log = block_log(n_users=400, n_items=80, n_user_blocks=2, n_item_blocks=2, per_user=12, seed=seed)
    train, held = split_pairs(log, holdout=0.2, seed=seed)
    cfg = MFConfig(dim=dim, epochs=epochs, lr=0.05, reg=1e-4, seed=seed)
    t0 = time.perf_counter()
    table = train_mf(train, cfg, items=log.items)
    elapsed = time.perf_counter() - t0

    rng = np.random.default_rng(seed + 1)
    # the preference label is block membership: a user's negatives are the
    # items of the other item block (unclicked items of the user's own block
    # tie with positives under a rank-1 model and would cap AUC near 0.8)
    n_blocks = 2
    pos, neg = [], []
    for x in held:
        if not table.has_user(x.user_id):
            continue
        u = table.user_vec(x.user_id)
        pos.append(float(u @ table.item_vec(x.item_id)))
        ub = int(x.user_id[1:]) % n_blocks
        while True:
            j = table.item_ids[rng.integers(len(table.item_ids))]
            if int(j[1:]) % n_blocks != ub:
                break
        neg.append(float(u @ table.item_vec(j)))
    return table, auc_exhaustive(pos, neg), elapsed, (pos, neg)


def genre_graph(n_genres=4, items_per_genre=6, n_moods=3, seed=0):
    """Items carry a genre and a mood; users click within one genre.

    Same-genre pairs are the positives. Moods cut across genres, so many
    negative pairs connect through a shared mood; pairs without any path
    are dropped.
    """
    from recknow.cf import count_cooccurrence
    from recknow.corpus import CatalogRecord, Interaction, InteractionLog, ItemCatalog
    from recknow.kg import build_domain_graph

    rng = np.random.default_rng(seed)
    items, genre = {}, {}
    for k in range(n_genres * items_per_genre):
        iid = f"{k + 1}"
        genre[iid] = f"G{k % n_genres}"
        mood = f"M{rng.integers(n_moods)}"
        items[iid] = CatalogRecord(f"Film {k + 1}", (("genre", genre[iid]), ("mood", mood)))
    catalog = ItemCatalog(items, ("genre", "mood"))
    rows = []
    for u in range(10 * n_genres):
        g = f"G{u % n_genres}"
        for t, iid in enumerate(sorted(i for i in items if genre[i] == g)):
            rows.append(Interaction(f"u{u}", iid, None, t))
    log = InteractionLog(rows)
    stats = count_cooccurrence(log)
    graph = build_domain_graph(catalog, log, stats=None)
    return graph, stats, genre


def path_scorer_run(seed=0, epochs=30):
    """Train on ``genre_graph``; return (scorer, pair AUC, graph, labelled pair scores)."""
    from recknow.kg import ScorerConfig, enumerate_paths, pair_relevance_kprn, train_path_scorer

    graph, stats, genre = genre_graph(seed=seed)
    scorer = train_path_scorer(graph, stats, theta=0.2, config=ScorerConfig(dim=8, epochs=epochs, seed=seed))
    items = sorted(genre, key=int)
    pos, neg = [], []
    for a in range(len(items)):
        for b in range(a + 1, len(items)):
            paths = enumerate_paths(graph, items[a], items[b])
            if not paths:
                continue
            s = pair_relevance_kprn(scorer, paths)
            (pos if genre[items[a]] == genre[items[b]] else neg).append(s)
    return scorer, auc_exhaustive(pos, neg), graph, (pos, neg)


def three_path_batch(seed=0):
    """A two-pair toy batch (three paths) for gradient checks."""
    from recknow.kg import CO_CLICK, PathScorer, ReasoningPath, ScorerConfig, encode_pairs

    scorer = PathScorer.init(["has_genre", "genre_of", CO_CLICK], ScorerConfig(dim=4, n_buckets=8, seed=seed))
    paths = [[ReasoningPath(("item:1", "attr:g", "item:2"), ("has_genre", "genre_of")),
              ReasoningPath(("item:1", "item:3", "item:2"), (CO_CLICK, CO_CLICK))],
             [ReasoningPath(("item:4", "attr:h", "item:5"), ("has_genre", "genre_of"))]]
    return scorer, encode_pairs(scorer, paths, [1.0, 0.0])


def gradient_errors(seed=0, eps=1e-6):
    """Relative error between analytic and central-difference gradients, per parameter."""
    from recknow.kg import loss_and_grad

    scorer, batch = three_path_batch(seed)
    params = {k: v.astype(float).copy() for k, v in scorer.params().items()}
    _, grads = loss_and_grad(params, batch)
    out = {}
    for name, value in params.items():
        num = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + eps
            up = loss_and_grad(params, batch, with_grad=False)[0]
            value[idx] = old - eps
            down = loss_and_grad(params, batch, with_grad=False)[0]
            value[idx] = old
            num[idx] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(grads[name]) + np.linalg.norm(num), 1e-12)
        out[name] = float(np.linalg.norm(grads[name] - num) / denom)
    return out


TOY_CONFIG = """
output = "{out}"
[dataset]
name = "toy"
format = "ml1m"
interactions = "data/ratings.dat"
catalog = "data/movies.dat"
[sampling]
seed = 0
[cf]
dim = 8
epochs = 10
[kg]
triples = "data/kg_triples.tsv"
labels = "data/kg_labels.tsv"
epochs = 3
[knowledge]
variant = "his_cand_u2i"
[gateway]
cache_dir = "{cache}"
[eval]
group_axes = ["history_length"]
"""


def toy_workspace(root, n_users=50, seed=1, out="out", cache="llm_cache"):
    """Write a 50-user movie dataset and a run config under ``root``."""
    from pathlib import Path

    from recknow.synthetic import genre_world, write_ml1m_files

    root = Path(root)
    if not (root / "data" / "ratings.dat").exists():
        write_ml1m_files(genre_world(n_users=n_users, seed=seed), root / "data")
    cfg = root / f"{out}.toml"
    cfg.write_text(TOY_CONFIG.format(out=out, cache=cache))
    return cfg


def reversing_llm(calls):
    """Gateway factory whose fake HTTP model returns the shown candidates reversed."""
    import json

    import httpx

    from recknow.llm import Gateway

    def handler(request):
        calls.append(1)
        text = json.loads(request.content)["messages"][0]["content"]
        line = next(l for l in text.splitlines() if l.startswith("Now there are"))
        titles = line[line.index("[") + 1:-1].split(", ")
        return httpx.Response(200, json={"choices": [{"message": {"content": json.dumps(titles[::-1])}}]})

    def factory(conf, backend, cache_dir, title):
        return Gateway(conf, backend, cache_dir, title=title, transport=httpx.MockTransport(handler),
                       environ={"OPENAI_API_KEY": "test-key"}, sleep=lambda s: None)

    return factory
