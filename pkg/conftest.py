import numpy as np
import pytest

from data import ClientDataset, Corpus, ItemCatalog, build_sessions
from linalg import RngStream
from model import Example, Item, ModelConfig, Vocabulary, init_params

N_ITEMS = 8


def tiny_catalog(n_items=N_ITEMS):
    features = np.array([[i % 2] for i in range(n_items)], dtype=np.int64)
    return ItemCatalog(n_items, features, (2,))


def separable_client(client_id, group, catalog, with_timestamps=True):
    """A user in ``group`` likes exactly the items whose feature equals the group."""
    interactions = []
    for t, item_id in enumerate(range(catalog.n_items)):
        item = catalog.item(item_id)
        ts = float(10 * t) if with_timestamps else None
        interactions.append(Example((group,), item_id, item.features, int(item.features[0] == group), ts))
    interactions = tuple(interactions)
    return ClientDataset(client_id, (group,), interactions, tuple(build_sessions(interactions, 3600, 10)))


def separable_corpus(n_clients=20, n_items=N_ITEMS):
    catalog = tiny_catalog(n_items)
    clients = tuple(separable_client(i, i % 2, catalog) for i in range(n_clients))
    return Corpus("synthetic", clients, catalog, (2,), ("group",), ("parity",))


@pytest.fixture
def catalog():
    return tiny_catalog()


@pytest.fixture
def corpus():
    return separable_corpus()


@pytest.fixture
def small_dims():
    return ModelConfig(embedding_dim=4, hidden_dims=(8, 4))


@pytest.fixture
def theta(corpus, small_dims):
    return init_params(small_dims, corpus.vocabulary, RngStream(7, "init"))


@pytest.fixture
def items():
    return [Item(i, (i % 2,)) for i in range(6)]


@pytest.fixture
def tiny_vocab():
    return Vocabulary(user_vocab=(2, 3), item_vocab=(2,), n_items=6)
