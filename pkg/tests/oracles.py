"""Independent reference implementations the tests compare against.

These deliberately use the slowest obvious method and share no code with
the package beyond plain data types.
"""
import itertools
import math
from collections import Counter


def ndcg_bruteforce(order, truth, k):
    # general DCG/IDCG with a one-hot relevance vector
    rel = [1.0 if c == truth else 0.0 for c in order]
    dcg = sum(r / math.log2(pos + 2) for pos, r in enumerate(rel[:k]))
    ideal = sorted(rel, reverse=True)
    idcg = sum(r / math.log2(pos + 2) for pos, r in enumerate(ideal[:k]))
    return dcg / idcg if idcg else 0.0


def hit_bruteforce(order, truth, k):
    for pos in range(min(k, len(order))):
        if order[pos] == truth:
            return 1.0
    return 0.0


def cooccurrence_bruteforce(events):
    """events: iterable of (user, item). Returns (freq, pair_count) dicts."""
    baskets = {}
    for u, i in events:
        baskets.setdefault(u, set()).add(i)
    freq = Counter()
    pairs = Counter()
    for items in baskets.values():
        for i in items:
            freq[i] += 1
        for a in items:
            for b in items:
                if a < b:
                    pairs[(a, b)] += 1
    return freq, pairs


def relevance_bruteforce(freq, pairs, a, b):
    key = (a, b) if a < b else (b, a)
    c = pairs.get(key, 0)
    return c / math.sqrt(freq[a] * freq[b]) if c else 0.0


def auc_exhaustive(pos_scores, neg_scores):
    wins = 0.0
    for p in pos_scores:
        for n in neg_scores:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos_scores) * len(neg_scores))


def tfidf_cosine(doc_tokens, query_tokens, corpus):
    """sklearn-style smooth idf, raw tf, l2 normalisation, done by hand."""
    n = len(corpus)
    df = Counter()
    for toks in corpus:
        df.update(set(toks))

    def vec(toks):
        tf = Counter(toks)
        v = {t: c * (math.log((1 + n) / (1 + df[t])) + 1) for t, c in tf.items()}
        norm = math.sqrt(sum(x * x for x in v.values()))
        return {t: x / norm for t, x in v.items()} if norm else {}

    a, b = vec(doc_tokens), vec(query_tokens)
    return sum(a[t] * b.get(t, 0.0) for t in a)


def simple_paths_bruteforce(edges, src, dst, max_len):
    """All simple paths as (nodes, relations); edges is a set of (h, r, t)."""
    out_map = {}
    for h, r, t in edges:
        out_map.setdefault(h, []).append((r, t))
    found = []

    def walk(nodes, rels):
        if len(rels) > max_len:
            return
        if nodes[-1] == dst and rels:
            found.append((tuple(nodes), tuple(rels)))
            return
        for r, t in out_map.get(nodes[-1], []):
            if t not in nodes:
                walk(nodes + [t], rels + [r])

    walk([src], [])
    return found


def all_pairs(items):
    return list(itertools.combinations(sorted(items), 2))
