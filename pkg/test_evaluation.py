import math

import numpy as np
import pytest

from conftest import separable_client, tiny_catalog
from data import ClientDataset, Corpus, SplitPlan, build_sessions, split
from evaluation import (
    EvalConfig, EvaluationError, evaluate, hits_at_k, mean_ndcg_at_k, ndcg_at_k, order_by_scores, rank_candidates,
)
from federation import FederationConfig
from linalg import RngStream
from model import Example, ModelConfig, init_params


def oracle_scorer(theta, user_features, items):
    # rank_candidates always puts the true item first
    return -np.arange(len(items), dtype=float)


def wide_corpus(n_clients=20, n_items=60, seen=8):
    catalog = tiny_catalog(n_items)
    clients = []
    for i in range(n_clients):
        full = separable_client(i, i % 2, catalog)
        kept = full.interactions[:seen]
        clients.append(ClientDataset(i, full.user_features, kept, tuple(build_sessions(kept, 3600, 10))))
    return Corpus("synthetic", tuple(clients), catalog, (2,), ("group",), ("parity",))


def test_order_by_scores():
    assert order_by_scores([7, 3, 5], [0.9, 0.1, 0.5]) == [7, 5, 3]
    assert order_by_scores([9, 4, 6], [1.0, 1.0, 0.0]) == [4, 9, 6]


def test_rank_candidates_rejects_positive_among_negatives(theta):
    catalog = tiny_catalog()
    with pytest.raises(EvaluationError):
        rank_candidates(theta, (0,), catalog.item(1), catalog.items([1, 2]))
    assert rank_candidates(theta, (0,), catalog.item(1), catalog.items([2, 3]), oracle_scorer) == [1, 2, 3]


def test_hits_examples():
    assert hits_at_k([[1, 2, 11, 3, 20]], 10) == pytest.approx(0.6)
    assert hits_at_k([[1, 20], [3]], 10) == pytest.approx(0.75)
    assert hits_at_k({5: [100], 2: [1]}, 100) == 1.0
    with pytest.raises(EvaluationError):
        hits_at_k([[1], []], 5)
    with pytest.raises(EvaluationError):
        hits_at_k([[1]], 0)


def test_ndcg_examples():
    assert ndcg_at_k(1, 10) == 1.0
    assert ndcg_at_k(2, 10) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k(11, 10) == 0.0
    assert ndcg_at_k(None, 10) == 0.0
    assert mean_ndcg_at_k([[1, 2], [11]], 10) == pytest.approx((1.0 + 0.6309298) / 2 / 2)


def test_random_scores_hit_one_in_ten():
    catalog = tiny_catalog(200)
    rng = np.random.default_rng(0)

    def random_scorer(theta, user_features, items):
        return rng.random(len(items))

    trials = 4000
    ranks = []
    for t in range(trials):
        ids = rng.choice(np.arange(1, 200), size=99, replace=False)
        ranked = rank_candidates(None, (0,), catalog.item(0), catalog.items(ids), random_scorer)
        ranks.append(ranked.index(0) + 1)
    hits = hits_at_k([ranks], 10)
    stderr = np.sqrt(0.1 * 0.9 / trials)
    assert abs(hits - 0.1) < 3 * stderr


def test_oracle_model_scores_perfectly():
    corpus = wide_corpus()
    plan = split(corpus, RngStream(0, "split"))
    cfg = EvalConfig(k_values=(1, 5), negatives=20, personalize=False)
    report = evaluate(None, corpus, plan, cfg, scorer=oracle_scorer)
    assert report.hits == {1: 1.0, 5: 1.0}
    assert report.ndcg == {1: 1.0, 5: 1.0}
    frame = report.to_frame("oracle")
    assert list(frame.columns) == ["model", "k", "hits", "ndcg"]
    assert len(report.per_user) == len(plan.test_users)
    assert "Hits@1" in report.summary()


def test_two_user_report_by_hand():
    # lower ids score higher; 99 negatives exhaust the unseen items of an 8-item catalog
    catalog = tiny_catalog()

    def by_id(theta, user_features, items):
        return -np.array([item.item_id for item in items], dtype=float)

    def ex(item_id, label):
        return Example((0,), item_id, catalog.item(item_id).features, label)

    halves = {
        0: ((ex(1, 1),), (ex(0, 0), ex(3, 1), ex(6, 1))),  # unseen 2,4,5,7: ranks 2 and 4
        1: ((ex(0, 1),), (ex(5, 1),)),  # unseen 1,2,3,4,6,7: rank 5
    }
    clients = tuple(ClientDataset(uid, (0,), first + second) for uid, (first, second) in halves.items())
    corpus = Corpus("synthetic", clients, catalog, (2,))
    plan = SplitPlan((), (0, 1), halves)
    report = evaluate(None, corpus, plan, EvalConfig(k_values=(1, 2, 5), personalize=False), scorer=by_id)

    assert report.hits == {1: 0.0, 2: 0.25, 5: 1.0}
    assert report.ndcg[1] == 0.0
    assert report.ndcg[2] == pytest.approx((1 / math.log2(3)) / 2 / 2)
    user0 = (1 / math.log2(3) + 1 / math.log2(5)) / 2
    assert report.ndcg[5] == pytest.approx((user0 + 1 / math.log2(6)) / 2)
    assert list(report.per_user["cases"]) == [2, 1]
    assert list(report.per_user["hits@2"]) == [0.5, 0.0]


def test_evaluation_is_seeded():
    corpus = wide_corpus()
    theta = init_params(ModelConfig(embedding_dim=4, hidden_dims=(8, 4)), corpus.vocabulary, RngStream(7, "init"))
    plan = split(corpus, RngStream(0, "split"))
    train_cfg = FederationConfig(local_epochs=2, batch_size=4, negatives=1, seed=0)
    cfg = EvalConfig(k_values=(5, 10), negatives=20)
    a = evaluate(theta, corpus, plan, cfg, train_cfg)
    b = evaluate(theta, corpus, plan, EvalConfig(k_values=(5, 10), negatives=20, threads=3), train_cfg)
    assert a.hits == b.hits and a.ndcg == b.ndcg
    for k in (5, 10):
        assert 0.0 <= a.hits[k] <= 1.0
        assert a.ndcg[k] <= a.hits[k]


def test_users_without_held_out_positives_are_skipped():
    corpus = wide_corpus()
    plan = split(corpus, RngStream(0, "split"))
    quiet = plan.test_users[0]
    first, second = plan.halves[quiet]
    plan.halves[quiet] = (first, tuple(ex for ex in second if ex.label == 0))
    report = evaluate(None, corpus, plan, EvalConfig(k_values=(5,), negatives=20, personalize=False),
                      scorer=oracle_scorer)
    assert quiet not in set(report.per_user["user"])
    assert len(report.per_user) == len(plan.test_users) - 1


def test_inactive_filter():
    corpus = wide_corpus()
    plan = split(corpus, RngStream(0, "split"))
    with pytest.raises(EvaluationError):
        evaluate(None, corpus, plan, EvalConfig(negatives=20, personalize=False, inactive_below=5),
                 scorer=oracle_scorer)
    report = evaluate(None, corpus, plan, EvalConfig(negatives=20, personalize=False, inactive_below=9),
                      scorer=oracle_scorer)
    assert (report.per_user["interactions"] < 9).all()
