"""Leave-half-out ranking evaluation with sampled negatives.

Every positive interaction in a test user's held-out half is ranked against
``negatives`` items the user never interacted with. Hits@k and nDCG@k are
computed per user and then averaged over users.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from data import draw_items_excluding
from federation import FederationError, personalize
from linalg import RngStream
from model import score_items

logger = logging.getLogger(__name__)

DEFAULT_K = (5, 10, 20, 30)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    k_values: tuple = DEFAULT_K
    negatives: int = 99
    seed: int = 0
    personalize: bool = True
    inactive_below: int = None
    threads: int = 1

    def validate(self):
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise EvaluationError("k values must be >= 1")
        if self.negatives < 0:
            raise EvaluationError("negative count must be >= 0")
        if self.inactive_below is not None and self.inactive_below < 1:
            raise EvaluationError("inactive_below must be >= 1")
        return self


@dataclass
class MetricsReport:
    k_values: tuple
    hits: dict
    ndcg: dict
    per_user: pd.DataFrame = field(default=None, repr=False)

    def to_frame(self, model="privrec"):
        return pd.DataFrame(
            [{"model": model, "k": k, "hits": self.hits[k], "ndcg": self.ndcg[k]} for k in self.k_values],
            columns=["model", "k", "hits", "ndcg"],
        )

    def summary(self):
        users = 0 if self.per_user is None else len(self.per_user)
        lines = [f"users evaluated: {users}"]
        for k in self.k_values:
            lines.append(f"  Hits@{k:<3d} {self.hits[k]:.4f}   nDCG@{k:<3d} {self.ndcg[k]:.4f}")
        return "\n".join(lines)


def order_by_scores(item_ids, scores):
    """Item ids by descending score; ties go to the smaller id."""
    return [i for _, i in sorted(zip(scores, item_ids), key=lambda pair: (-pair[0], pair[1]))]


def rank_candidates(theta, user_features, positive, negatives, scorer=score_items):
    if any(n.item_id == positive.item_id for n in negatives):
        raise EvaluationError(f"positive item {positive.item_id} is among the negatives")
    candidates = [positive] + list(negatives)
    scores = np.asarray(scorer(theta, user_features, candidates), dtype=np.float64)
    return order_by_scores([c.item_id for c in candidates], scores)


def _per_user(user_ranks):
    if isinstance(user_ranks, dict):
        user_ranks = [user_ranks[u] for u in sorted(user_ranks)]
    user_ranks = [list(r) for r in user_ranks]
    if not user_ranks or any(not r for r in user_ranks):
        raise EvaluationError("metrics need at least one test case per user")
    return user_ranks


def ndcg_at_k(rank, k):
    """Binary-relevance DCG of a single positive at ``rank`` (None is a miss)."""
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if rank is None:
        return 0.0
    if rank < 1:
        raise EvaluationError(f"rank must be >= 1, got {rank}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hits_at_k(user_ranks, k):
    """Fraction of test cases ranked within k, per user, averaged over users."""
    if k < 1:
        raise EvaluationError("k must be >= 1")
    per_user = [np.mean([r is not None and r <= k for r in ranks]) for ranks in _per_user(user_ranks)]
    return float(np.mean(per_user))


def mean_ndcg_at_k(user_ranks, k):
    per_user = [np.mean([ndcg_at_k(r, k) for r in ranks]) for ranks in _per_user(user_ranks)]
    return float(np.mean(per_user))


def _user_ranks(theta, uid, halves, catalog, cfg, train_cfg, scorer):
    d_train, d_test = halves
    cases = [ex for ex in d_test if ex.label == 1]
    if not cases:
        return None
    model = theta
    if cfg.personalize and d_train and train_cfg is not None:
        try:
            model = personalize(theta, d_train, train_cfg, catalog, RngStream(cfg.seed, "personalize", uid))
        except FederationError as e:
            logger.warning("user %d: %s; evaluating the global model", uid, e)
    seen = {ex.item_id for ex in d_train} | {ex.item_id for ex in d_test}
    ranks = []
    for c, ex in enumerate(cases):
        rng = RngStream(cfg.seed, "eval", uid, c)
        negatives = catalog.items(draw_items_excluding(rng, catalog, seen, cfg.negatives))
        ranked = rank_candidates(model, ex.user_features, ex.item, negatives, scorer)
        ranks.append(ranked.index(ex.item_id) + 1)
    return ranks


def evaluate(theta, corpus, plan, cfg, train_cfg=None, scorer=score_items):
    """Personalize on each test user's first half and rank the second half's positives."""
    cfg.validate()
    users = []
    for uid in plan.test_users:
        d_train, d_test = plan.halves[uid]
        if cfg.inactive_below is not None and len(d_train) + len(d_test) >= cfg.inactive_below:
            continue
        users.append(uid)

    def task(uid):
        return _user_ranks(theta, uid, plan.halves[uid], corpus.catalog, cfg, train_cfg, scorer)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(task, users))
    else:
        results = [task(uid) for uid in users]

    ranks = {}
    for uid, r in zip(users, results):
        if r is None:
            logger.warning("test user %d has no positive held-out interactions; skipped", uid)
        else:
            ranks[uid] = r
    if not ranks:
        raise EvaluationError("no test user has a positive held-out interaction")

    rows = []
    for uid, r in ranks.items():
        n_interactions = sum(len(h) for h in plan.halves[uid])
        row = {"user": uid, "cases": len(r), "interactions": n_interactions}
        for k in cfg.k_values:
            row[f"hits@{k}"] = hits_at_k([r], k)
            row[f"ndcg@{k}"] = mean_ndcg_at_k([r], k)
        rows.append(row)
    per_user = pd.DataFrame(rows)
    return MetricsReport(
        tuple(cfg.k_values),
        {k: float(per_user[f"hits@{k}"].mean()) for k in cfg.k_values},
        {k: float(per_user[f"ndcg@{k}"].mean()) for k in cfg.k_values},
        per_user,
    )
