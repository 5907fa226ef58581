"""Dataset ingestion, client partitioning, sessions, SSL views and the user split.

MovieLens-1M is read from the distribution's ``::``-separated files:

    ratings.dat  UserID::MovieID::Rating::Timestamp
    users.dat    UserID::Gender::Age::Occupation::Zip-code
    movies.dat   MovieID::Title::Genres          (genres joined by "|")

Frappe is read from a tab-separated file with a header row containing
``user item cnt daytime weekday isweekend homework cost weather country city``
and optionally ``rating``. Ratings greater than 3 become label 1, everything
else label 0, for both datasets.
"""

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from model import Example, Item, ItemMaskedView, SegmentMaskedView, Session, Vocabulary

logger = logging.getLogger(__name__)

MOVIELENS_GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)
MOVIELENS_AGES = (1, 18, 25, 35, 45, 50, 56)
MOVIELENS_OCCUPATIONS = 21
MOVIELENS_EXPECTED = {"users": 6040, "items": 3706, "interactions": 1000209}

FRAPPE_USER_FIELDS = ("daytime", "weekday", "isweekend", "homework", "weather", "country", "city")
FRAPPE_ITEM_FIELDS = ("cnt", "cost")
FRAPPE_EXPECTED = {"users": 957, "items": 4082, "interactions": 288609}
FRAPPE_CNT_BUCKETS = 17

POSITIVE_RATING_ABOVE = 3
DEFAULT_SESSION_GAP = 3600.0
DEFAULT_MAX_SESSION_LEN = 10


class DataError(ValueError):
    """Raised when a dataset cannot be turned into a corpus."""


class MalformedRowError(DataError):
    def __init__(self, path, line, reason):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class ItemCatalog:
    n_items: int
    features: np.ndarray
    item_vocab: tuple

    def item(self, item_id):
        return Item(int(item_id), tuple(int(v) for v in self.features[item_id]))

    def items(self, item_ids):
        return [self.item(i) for i in item_ids]


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    user_features: tuple
    interactions: tuple
    sessions: tuple = ()

    @property
    def positives(self):
        return [ex for ex in self.interactions if ex.label == 1]

    @property
    def item_ids(self):
        return {ex.item_id for ex in self.interactions}


@dataclass(frozen=True)
class Corpus:
    dataset: str
    clients: tuple
    catalog: ItemCatalog
    user_vocab: tuple
    user_fields: tuple = ()
    item_fields: tuple = ()
    item_labels: tuple = ()

    @property
    def vocabulary(self):
        return Vocabulary(tuple(self.user_vocab), tuple(self.catalog.item_vocab), self.catalog.n_items)

    def client(self, client_id):
        return self.by_id()[client_id]

    def by_id(self):
        return {c.client_id: c for c in self.clients}

    def interaction_counts(self):
        return pd.Series({c.client_id: len(c.interactions) for c in self.clients}, name="interactions")

    def stats(self):
        counts = self.interaction_counts()
        return {
            "dataset": self.dataset,
            "users": len(self.clients),
            "items": self.catalog.n_items,
            "interactions": int(counts.sum()),
            "median_interactions": float(counts.median()) if len(counts) else 0.0,
            "mean_interactions": float(counts.mean()) if len(counts) else 0.0,
        }


@dataclass(frozen=True)
class SplitPlan:
    train_users: tuple
    test_users: tuple
    halves: dict = field(default_factory=dict)


# --- ingestion -------------------------------------------------------------

def _first_bad_line(path, n_fields):
    with open(path, encoding="latin-1") as f:
        for number, row in enumerate(f, 1):
            row = row.rstrip("\r\n")
            if row and len(row.split("::")) != n_fields:
                return number
    return None


def _read_dat(path, names):
    try:
        frame = pd.read_csv(path, sep="::", engine="python", header=None, names=names,
                            dtype=str, encoding="latin-1", keep_default_na=False)
    except pd.errors.ParserError as e:
        raise MalformedRowError(path, _first_bad_line(path, len(names)), f"expected {len(names)} fields") from e
    missing = frame.isna().any(axis=1) | (frame == "").any(axis=1)
    if missing.any():
        raise MalformedRowError(path, int(missing.idxmax()) + 1, f"expected {len(names)} fields")
    return frame


def _numeric(frame, path, columns):
    for column in columns:
        values = pd.to_numeric(frame[column], errors="coerce")
        if values.isna().any():
            line = int(values.isna().idxmax()) + 1
            raise MalformedRowError(path, line, f"{column} is not a number: {frame[column][line - 1]!r}")
        frame[column] = values
    return frame


def _warn_counts(dataset, observed, expected):
    for key, value in expected.items():
        if observed[key] != value:
            logger.warning("%s: %d %s, published dataset has %d", dataset, observed[key], key, value)


def ingest_movielens(path, session_gap=DEFAULT_SESSION_GAP, max_session_len=DEFAULT_MAX_SESSION_LEN):
    ratings_path = os.path.join(path, "ratings.dat")
    users_path = os.path.join(path, "users.dat")
    movies_path = os.path.join(path, "movies.dat")
    for p in (ratings_path, users_path, movies_path):
        if not os.path.exists(p):
            raise DataError(f"missing MovieLens file {p}")

    ratings = _numeric(_read_dat(ratings_path, ["user", "movie", "rating", "timestamp"]),
                       ratings_path, ["user", "movie", "rating", "timestamp"])
    users = _numeric(_read_dat(users_path, ["user", "gender", "age", "occupation", "zip"]),
                     users_path, ["user", "age", "occupation"])
    movies = _numeric(_read_dat(movies_path, ["movie", "title", "genres"]), movies_path, ["movie"])

    user_rows = {}
    for line, row in enumerate(users.itertuples(index=False), start=1):
        if row.gender not in ("F", "M"):
            raise MalformedRowError(users_path, line, f"unknown gender {row.gender!r}")
        if int(row.age) not in MOVIELENS_AGES:
            raise MalformedRowError(users_path, line, f"unknown age code {row.age}")
        if not 0 <= int(row.occupation) < MOVIELENS_OCCUPATIONS:
            raise MalformedRowError(users_path, line, f"unknown occupation {row.occupation}")
        user_rows[int(row.user)] = (
            MOVIELENS_AGES.index(int(row.age)),
            0 if row.gender == "F" else 1,
            int(row.occupation),
        )

    genre_index = {g: k for k, g in enumerate(MOVIELENS_GENRES)}
    movie_genres, unknown = {}, set()
    for row in movies.itertuples(index=False):
        flags = [0] * len(MOVIELENS_GENRES)
        for genre in str(row.genres).split("|"):
            if genre in genre_index:
                flags[genre_index[genre]] = 1
            else:
                unknown.add(genre)
        movie_genres[int(row.movie)] = tuple(flags)
    if unknown:
        logger.warning("ignoring unknown genres: %s", sorted(unknown))

    movie_ids = sorted(int(m) for m in ratings["movie"].unique())
    item_index = {m: i for i, m in enumerate(movie_ids)}
    features = np.array([movie_genres.get(m, (0,) * len(MOVIELENS_GENRES)) for m in movie_ids], dtype=np.int64)
    catalog = ItemCatalog(len(movie_ids), features.reshape(len(movie_ids), len(MOVIELENS_GENRES)),
                          (2,) * len(MOVIELENS_GENRES))

    ratings = ratings.sort_values(["user", "timestamp", "movie"], kind="mergesort")
    clients = []
    for client_id, (user, group) in enumerate(ratings.groupby("user", sort=True)):
        if int(user) not in user_rows:
            raise DataError(f"user {int(user)} has ratings but no row in {users_path}")
        user_features = user_rows[int(user)]
        interactions = tuple(
            Example(user_features, item_index[int(m)], catalog.item(item_index[int(m)]).features,
                    int(r > POSITIVE_RATING_ABOVE), float(t))
            for m, r, t in zip(group["movie"], group["rating"], group["timestamp"])
        )
        sessions = tuple(build_sessions(interactions, session_gap, max_session_len))
        clients.append(ClientDataset(client_id, user_features, interactions, sessions))

    corpus = Corpus(
        dataset="movielens",
        clients=tuple(clients),
        catalog=catalog,
        user_vocab=(len(MOVIELENS_AGES), 2, MOVIELENS_OCCUPATIONS),
        user_fields=("age", "gender", "occupation"),
        item_fields=MOVIELENS_GENRES,
        item_labels=tuple(str(m) for m in movie_ids),
    )
    _warn_counts("movielens", corpus.stats(), MOVIELENS_EXPECTED)
    return corpus


def _cnt_bucket(cnt):
    return min(int(math.floor(math.log2(max(float(cnt), 0.0) + 1.0))), FRAPPE_CNT_BUCKETS - 1)


def ingest_frappe(path, max_session_len=DEFAULT_MAX_SESSION_LEN):
    file_path = os.path.join(path, "frappe.csv") if os.path.isdir(path) else path
    if not os.path.exists(file_path):
        raise DataError(f"missing Frappe file {file_path}")
    frame = pd.read_csv(file_path, sep="\t", dtype=str, keep_default_na=False)
    required = ("user", "item") + FRAPPE_ITEM_FIELDS + FRAPPE_USER_FIELDS
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"{file_path}: missing columns {missing}")
    # header is line 1
    for column in ("user", "item", "cnt") + (("rating",) if "rating" in frame.columns else ()):
        values = pd.to_numeric(frame[column], errors="coerce")
        if values.isna().any():
            raise MalformedRowError(file_path, int(values.isna().idxmax()) + 2, f"{column} is not a number")
        frame[column] = values
    if "rating" in frame.columns:
        labels = (frame["rating"] > POSITIVE_RATING_ABOVE).astype(int)
    else:
        logger.warning("%s has no rating column; every row is treated as positive", file_path)
        labels = pd.Series(1, index=frame.index)
    frame["label"] = labels
    frame["cnt_bucket"] = frame["cnt"].map(_cnt_bucket)

    vocabularies = {f: {v: i for i, v in enumerate(sorted(frame[f].unique()))} for f in FRAPPE_USER_FIELDS}
    cost_vocab = {v: i for i, v in enumerate(sorted(frame["cost"].unique()))}

    item_ids = sorted(int(i) for i in frame["item"].unique())
    item_index = {m: i for i, m in enumerate(item_ids)}
    features = np.zeros((len(item_ids), 2), dtype=np.int64)
    for item, group in frame.groupby("item", sort=True):
        features[item_index[int(item)]] = (
            Counter(group["cnt_bucket"]).most_common(1)[0][0],
            cost_vocab[Counter(group["cost"]).most_common(1)[0][0]],
        )
    catalog = ItemCatalog(len(item_ids), features, (FRAPPE_CNT_BUCKETS, len(cost_vocab)))

    clients = []
    for client_id, (user, group) in enumerate(frame.groupby("user", sort=True)):
        user_features = tuple(
            vocabularies[f][sorted(Counter(group[f]).most_common(), key=lambda kv: (-kv[1], kv[0]))[0][0]]
            for f in FRAPPE_USER_FIELDS
        )
        interactions = tuple(
            Example(user_features, item_index[int(m)], catalog.item(item_index[int(m)]).features, int(y))
            for m, y in zip(group["item"], group["label"])
        )
        sessions = tuple(build_sessions(interactions, None, max_session_len))
        clients.append(ClientDataset(client_id, user_features, interactions, sessions))

    corpus = Corpus(
        dataset="frappe",
        clients=tuple(clients),
        catalog=catalog,
        user_vocab=tuple(len(vocabularies[f]) for f in FRAPPE_USER_FIELDS),
        user_fields=FRAPPE_USER_FIELDS,
        item_fields=FRAPPE_ITEM_FIELDS,
        item_labels=tuple(str(m) for m in item_ids),
    )
    _warn_counts("frappe", corpus.stats(), FRAPPE_EXPECTED)
    return corpus


def ingest(path, dataset, session_gap=DEFAULT_SESSION_GAP, max_session_len=DEFAULT_MAX_SESSION_LEN):
    """Parse a raw dataset into a Corpus and check every index against its vocabularies."""
    if dataset == "movielens":
        corpus = ingest_movielens(path, session_gap, max_session_len)
    elif dataset == "frappe":
        corpus = ingest_frappe(path, max_session_len)
    else:
        raise DataError(f"unknown dataset {dataset!r}")
    validate_corpus(corpus)
    logger.info("ingested %s: %s", dataset, corpus.stats())
    return corpus


def validate_corpus(corpus):
    n_items = corpus.catalog.n_items
    for client in corpus.clients:
        if len(client.user_features) != len(corpus.user_vocab):
            raise DataError(f"client {client.client_id}: wrong number of user features")
        for value, size in zip(client.user_features, corpus.user_vocab):
            if not 0 <= value < size:
                raise DataError(f"client {client.client_id}: user feature {value} outside vocabulary {size}")
        for ex in client.interactions:
            if not 0 <= ex.item_id < n_items:
                raise DataError(f"client {client.client_id}: item {ex.item_id} outside catalog")
            if ex.user_features != client.user_features:
                raise DataError(f"client {client.client_id}: examples disagree on user features")
            for value, size in zip(ex.item_features, corpus.catalog.item_vocab):
                if not 0 <= value < size:
                    raise DataError(f"client {client.client_id}: item feature {value} outside vocabulary {size}")


def subsample(corpus, n_users, rng):
    """A corpus restricted to n_users randomly chosen clients (catalog unchanged)."""
    if n_users >= len(corpus.clients):
        return corpus
    chosen = sorted(int(i) for i in rng.generator.choice(len(corpus.clients), size=n_users, replace=False))
    clients = tuple(corpus.clients[i] for i in chosen)
    return Corpus(corpus.dataset, clients, corpus.catalog, corpus.user_vocab,
                  corpus.user_fields, corpus.item_fields, corpus.item_labels)


# --- split -----------------------------------------------------------------

def split(corpus, rng, train_fraction=0.8):
    """User-level train/test split; each test user's history is halved by time."""
    ids = sorted(c.client_id for c in corpus.clients)
    if len(ids) < 5:
        raise DataError(f"need at least 5 users to split, got {len(ids)}")
    order = [ids[i] for i in rng.generator.permutation(len(ids))]
    n_train = min(int(math.floor(train_fraction * len(ids) + 0.5)), len(ids) - 1)
    train_users = tuple(sorted(order[:n_train]))
    test_users = tuple(sorted(order[n_train:]))
    by_id = corpus.by_id()
    halves = {}
    for uid in test_users:
        interactions = by_id[uid].interactions
        cut = (len(interactions) + 1) // 2
        halves[uid] = (tuple(interactions[:cut]), tuple(interactions[cut:]))
    return SplitPlan(train_users, test_users, halves)


# --- sessions and views ----------------------------------------------------

def build_sessions(interactions, gap, max_len=DEFAULT_MAX_SESSION_LEN):
    """Group positives into runs with gaps <= gap, then chunk runs to max_len.

    With gap None (no usable timestamps) the ordered positives are simply
    chunked.
    """
    positives = [ex for ex in interactions if ex.label == 1]
    if not positives:
        return []
    runs, current = [], [positives[0]]
    for previous, ex in zip(positives, positives[1:]):
        if gap is not None and previous.timestamp is not None and ex.timestamp is not None \
                and ex.timestamp - previous.timestamp > gap:
            runs.append(current)
            current = []
        current.append(ex)
    runs.append(current)
    sessions = []
    for run in runs:
        for start in range(0, len(run), max_len):
            sessions.append(Session(tuple(ex.item for ex in run[start:start + max_len])))
    return sessions


def draw_items_excluding(rng, catalog, exclude, count):
    """``count`` distinct item ids drawn uniformly from the catalog minus ``exclude``."""
    available = catalog.n_items - len(exclude)
    count = min(count, max(available, 0))
    chosen = []
    seen = set(exclude)
    while len(chosen) < count:
        for candidate in rng.generator.integers(0, catalog.n_items, size=2 * (count - len(chosen)) + 4):
            candidate = int(candidate)
            if candidate not in seen:
                seen.add(candidate)
                chosen.append(candidate)
                if len(chosen) == count:
                    break
    return chosen


def sample_negatives(data, catalog, per_positive, rng):
    """Label-0 examples for items the user never interacted with."""
    if per_positive <= 0:
        return []
    seen = data.item_ids
    negatives = []
    for ex in data.positives:
        for item_id in draw_items_excluding(rng, catalog, seen, per_positive):
            negatives.append(Example(data.user_features, item_id, catalog.item(item_id).features, 0))
    return negatives


def _random_segment(rng, catalog, exclude, length):
    return Session(tuple(catalog.items(draw_items_excluding(rng, catalog, exclude, length))))


def make_views(s, rng, catalog, other_sessions=(), n_negatives=4):
    """Item-masked and segment-masked views of one session (None when too short)."""
    items = list(s.items)
    T = len(items)
    in_session = set(s.item_ids)
    item_view = segment_view = None

    if T >= 2:
        i = int(rng.generator.integers(0, T))
        negatives = catalog.items(draw_items_excluding(rng, catalog, in_session, max(n_negatives, 1)))
        if negatives:
            masked = items[:i] + [negatives[0]] + items[i + 1:]
            item_view = ItemMaskedView(Session(tuple(masked)), items[i], tuple([items[i]] + negatives), i)

    if T >= 4:
        length = int(rng.generator.integers(2, T // 2 + 1))
        start = int(rng.generator.integers(0, T - length + 1))
        positive = Session(tuple(items[start:start + length]))
        pool = [o for o in other_sessions if len(o) >= length and o.item_ids != s.item_ids]
        negatives = []
        for _ in range(max(n_negatives, 1)):
            segment = None
            if pool:
                other = pool[int(rng.generator.integers(0, len(pool)))]
                offset = int(rng.generator.integers(0, len(other) - length + 1))
                segment = Session(tuple(other.items[offset:offset + length]))
                if segment == positive or segment in negatives:
                    segment = None
            if segment is None:
                segment = _random_segment(rng, catalog, in_session, length)
            if len(segment) == length:
                negatives.append(segment)
        if negatives:
            masked = items[:start] + list(negatives[0].items) + items[start + length:]
            segment_view = SegmentMaskedView(Session(tuple(masked)), positive,
                                             tuple([positive] + negatives), start)
    return item_view, segment_view


def client_views(data, rng, catalog, n_negatives=4):
    views = []
    for s in data.sessions:
        others = [o for o in data.sessions if o is not s]
        for view in make_views(s, rng, catalog, others, n_negatives):
            if view is not None:
                views.append(view)
    return views
