import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import cooccurrence_bruteforce, relevance_bruteforce
from recknow import _core, _fallback
from recknow.cf import (
    EmbeddingTable, MFConfig, count_cooccurrence, embed_relevance, item_relevance, load_table,
    rank_scores, read_stats, save_table, topk_for_item, topk_for_user, train_mf, write_stats,
)
from recknow.corpus import Interaction, InteractionLog
from recknow.errors import SelfPair, UnknownItem, UnknownKey
from recknow.synthetic import block_log
from scenarios import mf_block_run


def log_of(events):
    return InteractionLog(Interaction(u, i, None, t) for t, (u, i) in enumerate(events))


TOY = [("u1", "A"), ("u1", "B"), ("u2", "A"), ("u2", "B"), ("u2", "C"), ("u3", "A"), ("u3", "C")]


# ------------------------------------------------------------ co-occurrence

def test_toy_counts_and_relevance():
    s = count_cooccurrence(log_of(TOY))
    assert s.item_freq("A") == 3 and s.item_freq("B") == 2 and s.item_freq("C") == 2
    assert s.pair_count("A", "B") == 2 and s.pair_count("B", "C") == 1
    assert item_relevance(s, "A", "B") == pytest.approx(2 / math.sqrt(6), abs=1e-12)
    assert item_relevance(s, "A", "B") == pytest.approx(0.81649658, abs=1e-8)
    assert item_relevance(s, "B", "C") == pytest.approx(0.5)


def test_repeat_clicks_count_once():
    s1 = count_cooccurrence(log_of(TOY))
    s2 = count_cooccurrence(log_of(TOY + [("u1", "A"), ("u1", "A"), ("u2", "C")]))
    assert list(s1.pairs()) == list(s2.pairs())
    assert s1.freq.tolist() == s2.freq.tolist()


def test_never_coclicked_is_zero():
    s = count_cooccurrence(log_of([("u1", "A"), ("u2", "B")]))
    assert item_relevance(s, "A", "B") == 0.0


def test_self_pair_and_unknown_item():
    s = count_cooccurrence(log_of(TOY))
    with pytest.raises(SelfPair):
        item_relevance(s, "A", "A")
    with pytest.raises(UnknownItem):
        item_relevance(s, "A", "Z")
    with pytest.raises(UnknownItem):
        topk_for_item(s, "Z", 3)


def test_widened_universe_has_zero_frequency():
    s = count_cooccurrence(log_of(TOY), items=["D"])
    assert s.item_freq("D") == 0
    assert item_relevance(s, "A", "D") == 0.0


events_strategy = st.lists(
    st.tuples(st.integers(0, 30), st.integers(0, 20)), min_size=1, max_size=200
)


@given(events_strategy)
def test_cooccurrence_matches_double_loop(raw):
    events = [(f"u{u}", f"i{i:02d}") for u, i in raw]
    s = count_cooccurrence(log_of(events))
    freq, pairs = cooccurrence_bruteforce(events)
    assert {i: s.item_freq(i) for i in s.item_ids} == dict(freq)
    assert {(a, b): c for a, b, c in s.pairs()} == dict(pairs)
    rel = s.relevance_matrix().toarray()
    assert np.allclose(rel, rel.T)
    assert rel.min() >= 0.0 and rel.max() <= 1.0 + 1e-12
    for a in s.item_ids:
        for b in s.item_ids:
            if a != b:
                assert item_relevance(s, a, b) == pytest.approx(relevance_bruteforce(freq, pairs, a, b), abs=1e-12)


def test_cooccurrence_kernels_agree():
    log = block_log(n_users=120, n_items=30, per_user=9, noise=0.3, seed=3)
    s = count_cooccurrence(log)
    users = log.users
    idx = {i: k for k, i in enumerate(s.item_ids)}
    indptr, indices = [0], []
    for u in users:
        indices += sorted({idx[x.item_id] for x in log.by_user[u]})
        indptr.append(len(indices))
    import scipy.sparse as sp
    X = sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(len(users), len(s.item_ids)))
    XT = X.T.tocsr()
    XT.sort_indices()
    args = (np.asarray(indptr, np.int32), np.asarray(indices, np.int32),
            XT.indptr.astype(np.int32), XT.indices.astype(np.int32), len(s.item_ids))
    a = _core.cooccurrence_csr(*args)
    b = _fallback.cooccurrence_csr(*args)
    for x, y in zip(a, b):
        assert np.array_equal(np.asarray(x), np.asarray(y))


def test_bpr_kernels_agree():
    rng = np.random.default_rng(0)
    U0, V0 = rng.normal(0, 0.1, (10, 4)), rng.normal(0, 0.1, (15, 4))
    users = rng.integers(10, size=200).astype(np.int64)
    pos = rng.integers(15, size=200).astype(np.int64)
    neg = rng.integers(15, size=200).astype(np.int64)
    Ua, Va, Ub, Vb = U0.copy(), V0.copy(), U0.copy(), V0.copy()
    la = _core.bpr_epoch(Ua, Va, users, pos, neg, 0.05, 1e-4)
    lb = _fallback.bpr_epoch(Ub, Vb, users, pos, neg, 0.05, 1e-4)
    assert la == pytest.approx(lb, rel=1e-9)
    assert np.allclose(Ua, Ub, atol=1e-10) and np.allclose(Va, Vb, atol=1e-10)


# ---------------------------------------------------------------------- MF

def test_zero_epochs_returns_seeded_init():
    log = log_of(TOY)
    t = train_mf(log, MFConfig(dim=3, epochs=0, seed=7))
    rng = np.random.default_rng(7)
    U = rng.normal(0, 0.1, size=(3, 3))
    V = rng.normal(0, 0.1, size=(3, 3))
    assert np.array_equal(t.user_matrix, U) and np.array_equal(t.item_matrix, V)
    assert t.loss_history == []


def test_same_seed_is_bit_identical():
    log = block_log(n_users=60, n_items=20, per_user=6, seed=1)
    a = train_mf(log, MFConfig(dim=4, epochs=5, seed=3))
    b = train_mf(log, MFConfig(dim=4, epochs=5, seed=3))
    c = train_mf(log, MFConfig(dim=4, epochs=5, seed=4))
    assert np.array_equal(a.user_matrix, b.user_matrix) and np.array_equal(a.item_matrix, b.item_matrix)
    assert not np.array_equal(a.item_matrix, c.item_matrix)


def test_block_structure_is_recovered():
    table, auc, elapsed, _ = mf_block_run(seed=0)
    assert auc >= 0.8
    assert elapsed < 60
    assert table.loss_history[-1] < table.loss_history[0]


def test_invalid_dim():
    with pytest.raises(ValueError):
        train_mf(log_of(TOY), MFConfig(dim=0))


def small_table():
    U = np.array([[1.0, 0.0], [0.0, 2.0]])
    V = np.array([[1.0, 1.0], [2.0, -1.0], [0.5, 0.5], [-1.0, 3.0]])
    return EmbeddingTable(2, ["u1", "u2"], U, ["a", "b", "c", "d"], V)


def test_embed_relevance_examples():
    t = small_table()
    assert embed_relevance(t, "u1", "b") == 2.0
    assert embed_relevance(t, "u2", "d") == 6.0
    assert embed_relevance(t, "a", "b", left_kind="item") == 1.0
    with pytest.raises(UnknownKey):
        embed_relevance(t, "u9", "a")
    with pytest.raises(ValueError):
        embed_relevance(t, "u1", "a", left_kind="shop")


@given(st.integers(0, 10_000))
def test_embed_relevance_matches_loop(seed):
    rng = np.random.default_rng(seed)
    U, V = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    t = EmbeddingTable(5, ["x", "y", "z"], U, ["a", "b", "c", "d"], V)
    for ui, u in enumerate(t.user_ids):
        for ii, i in enumerate(t.item_ids):
            ref = sum(U[ui, d] * V[ii, d] for d in range(5))
            assert abs(embed_relevance(t, u, i) - ref) < 1e-12


# ------------------------------------------------------------------ top-k

def test_topk_user_examples():
    t = small_table()
    assert [i for i, _ in topk_for_user(t, "u2", 2)] == ["d", "a"]
    assert [i for i, _ in topk_for_user(t, "u1", 4, exclude=["b"])] == ["a", "c", "d"]
    assert [i for i, _ in topk_for_user(t, "u1", 5, pool=["d", "c"])] == ["c", "d"]


def test_topk_ties_break_by_id():
    assert rank_scores(["c", "a", "b"], np.array([1.0, 1.0, 2.0])) == [("b", 2.0), ("a", 1.0), ("c", 1.0)]
    assert rank_scores([], np.array([])) == []


def test_topk_item_cooccurrence():
    s = count_cooccurrence(log_of(TOY))
    got = topk_for_item(s, "A", 2)
    assert got[0] == ("B", pytest.approx(2 / math.sqrt(6)))
    assert got[1][0] == "C"
    assert topk_for_item(s, "B", 5, pool=["A", "B", "Q"]) == [("A", pytest.approx(2 / math.sqrt(6))), ("Q", 0.0)]


def exhaustive_topk(ids, scores, k):
    return sorted(zip(ids, scores), key=lambda p: (-p[1], p[0]))[:k]


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=60), st.integers(1, 70))
def test_rank_scores_matches_full_sort(raw, k):
    ids = [f"i{n:03d}" for n in range(len(raw))]
    scores = np.array(raw, dtype=float)
    assert rank_scores(ids, scores, k) == exhaustive_topk(ids, raw, k)


@given(st.integers(0, 1000), st.floats(0.1, 10.0))
def test_topk_invariant_to_positive_scaling(seed, factor):
    rng = np.random.default_rng(seed)
    t = EmbeddingTable(3, ["u"], rng.normal(size=(1, 3)), [f"i{k}" for k in range(12)], rng.normal(size=(12, 3)))
    a = [i for i, _ in topk_for_user(t, "u", 5)]
    b = [i for i, _ in topk_for_user(t.scaled(factor), "u", 5)]
    assert a == b


def test_topk_bad_k():
    with pytest.raises(ValueError):
        topk_for_user(small_table(), "u1", 0)


# -------------------------------------------------------------------- I/O

def test_embedding_round_trip(tmp_path):
    t = train_mf(block_log(n_users=20, n_items=10, per_user=4), MFConfig(dim=3, epochs=2))
    save_table(t, tmp_path / "u.txt", tmp_path / "i.txt")
    back = load_table(tmp_path / "i.txt", tmp_path / "u.txt")
    assert back.item_ids == t.item_ids and back.user_ids == t.user_ids
    assert np.array_equal(back.item_matrix, t.item_matrix)
    assert np.array_equal(back.user_matrix, t.user_matrix)


def test_item_only_embeddings(tmp_path):
    t = small_table()
    save_table(t, tmp_path / "u.txt", tmp_path / "i.txt")
    back = load_table(tmp_path / "i.txt")
    assert back.user_ids == [] and back.provenance == "imported"
    with pytest.raises(ValueError):
        load_table(tmp_path / "u.txt")


def test_stats_round_trip(tmp_path):
    s = count_cooccurrence(log_of(TOY), items=["D"])
    write_stats(s, tmp_path / "p.tsv", tmp_path / "f.tsv")
    back = read_stats(tmp_path / "p.tsv", tmp_path / "f.tsv")
    assert back.item_ids == s.item_ids
    assert list(back.pairs()) == list(s.pairs())
    assert back.freq.tolist() == s.freq.tolist()
