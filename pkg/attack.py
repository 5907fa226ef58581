"""Membership inference against a trained recommender.

A shadow model is trained like the target on a disjoint population. Each
shadow user becomes one labeled example (user features, top-10 list, in/out)
and a random forest learns to tell members from non-members. The attack is
then pointed at the target's recommendation lists for probe users whose
membership is known.
"""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.metrics import accuracy_score

from evaluation import order_by_scores
from federation import train
from model import init_params, item_tower, score_items

logger = logging.getLogger(__name__)

REC_LIST_LEN = 10
IN, OUT = 1, 0


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class ShadowSplit:
    """Disjoint user populations (client ids) for one attack experiment."""

    shadow_users: tuple
    used: tuple
    unused: tuple
    members: tuple
    non_members: tuple

    @property
    def private_users(self):
        return tuple(sorted(self.members + self.non_members))

    @property
    def probe_users(self):
        return self.private_users

    def truth(self, users):
        members = set(self.members)
        return [IN if u in members else OUT for u in users]


@dataclass(frozen=True)
class AttackExample:
    user_id: int
    user_features: tuple
    rec_list: tuple
    label: int


@dataclass
class AttackModel:
    forest: RandomForestClassifier
    featurizer: object
    catalog: object
    user_vocab: tuple
    training_accuracy: float

    def features(self, examples):
        return featurize(self.featurizer, self.catalog, self.user_vocab, examples)

    def predict(self, examples):
        return self.forest.predict(self.features(examples))


def build_shadow(corpus, rng, n_shadow=1000, used_fraction=0.8):
    """Partition client ids into shadow used/unused and private members/non-members."""
    ids = sorted(c.client_id for c in corpus.clients)
    if n_shadow < 2 or n_shadow + 2 > len(ids):
        raise AttackError(f"cannot draw {n_shadow} shadow users and a private population from {len(ids)} users")
    order = [ids[i] for i in rng.generator.permutation(len(ids))]
    shadow, private = order[:n_shadow], order[n_shadow:]
    n_used = int(round(used_fraction * n_shadow))
    half = len(private) // 2
    split = ShadowSplit(
        shadow_users=tuple(sorted(shadow)),
        used=tuple(sorted(shadow[:n_used])),
        unused=tuple(sorted(shadow[n_used:])),
        members=tuple(sorted(private[:half])),
        non_members=tuple(sorted(private[half:])),
    )
    if set(split.shadow_users) & set(split.private_users):
        raise AttackError("shadow and probe populations overlap")
    return split


def train_shadow(corpus, users, model_cfg, fed_cfg, rng, progress=False):
    """A model with the target's architecture and settings, trained on ``users`` only."""
    by_id = corpus.by_id()
    clients = [by_id[u] for u in users]
    theta0 = init_params(model_cfg, corpus.vocabulary, rng)
    theta, _ = train(clients, fed_cfg, "dssm", theta0, corpus.catalog, progress=progress)
    return theta


def recommend_top_k(theta, user_features, catalog, k=REC_LIST_LEN):
    if catalog.n_items < k:
        raise AttackError(f"a top-{k} list needs at least {k} items, catalog has {catalog.n_items}")
    items = catalog.items(range(catalog.n_items))
    scores = score_items(theta, user_features, items)
    return tuple(order_by_scores([it.item_id for it in items], scores)[:k])


def build_attack_dataset(f_s, corpus, used, unused, k=REC_LIST_LEN):
    """One example per shadow user, labeled by whether it trained f_s."""
    by_id = corpus.by_id()
    used = set(used)
    examples = []
    for uid in sorted(used | set(unused)):
        features = by_id[uid].user_features
        examples.append(AttackExample(uid, features, recommend_top_k(f_s, features, corpus.catalog, k),
                                      IN if uid in used else OUT))
    return examples


def featurize(theta, catalog, user_vocab, examples):
    """User one-hots, raw item ids, per-rank embedding means and the list's mean embedding."""
    rows = []
    for ex in examples:
        one_hots = []
        for value, size in zip(ex.user_features, user_vocab):
            v = np.zeros(size)
            v[value] = 1.0
            one_hots.append(v)
        vectors = item_tower(theta, catalog.items(ex.rec_list))
        rows.append(np.concatenate(one_hots + [
            np.asarray(ex.rec_list, dtype=np.float64),
            vectors.mean(axis=1),
            vectors.mean(axis=0),
        ]))
    return np.vstack(rows)


def train_attack(examples, featurizer, catalog, user_vocab, seed=0, n_trees=50, max_depth=8):
    labels = np.array([ex.label for ex in examples])
    if len(set(labels.tolist())) < 2:
        raise AttackError("attack training needs both member and non-member examples")
    X = featurize(featurizer, catalog, user_vocab, examples)
    forest = RandomForestClassifier(n_estimators=n_trees, max_depth=max_depth, bootstrap=True,
                                    random_state=seed, n_jobs=1)
    forest.fit(X, labels)
    accuracy = float(accuracy_score(labels, forest.predict(X)))
    logger.info("attack model trained on %d examples, training accuracy %.3f", len(examples), accuracy)
    return AttackModel(forest, featurizer, catalog, tuple(user_vocab), accuracy)


def measure_attack(attack, target, corpus, probe_users, truth, k=REC_LIST_LEN):
    """Accuracy of the attack's in/out guesses on the target's lists for the probe users."""
    probe_users = list(probe_users)
    if not probe_users:
        raise AttackError("empty probe set")
    if len(truth) != len(probe_users):
        raise AttackError("one membership flag per probe user is required")
    by_id = corpus.by_id()
    examples = [
        AttackExample(u, by_id[u].user_features, recommend_top_k(target, by_id[u].user_features, corpus.catalog, k), t)
        for u, t in zip(probe_users, truth)
    ]
    return float(accuracy_score(np.asarray(truth), attack.predict(examples)))
