import hashlib
import json
import logging
import os

import numpy as np

from data import ClientDataset, Corpus, ItemCatalog, ingest
from model import Example, Session

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1


def source_files(path, dataset):
    """The raw files a corpus is built from, in a fixed order."""
    if dataset == "movielens":
        return [os.path.join(path, name) for name in ("movies.dat", "ratings.dat", "users.dat")]
    if os.path.isdir(path):
        return [os.path.join(path, "frappe.csv")]
    return [path]


def checksum(paths):
    digest = hashlib.sha256()
    for p in paths:
        digest.update(os.path.basename(p).encode("utf-8"))
        with open(p, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                digest.update(block)
    return digest.hexdigest()


class LocalCorpusStore:
    """Normalized corpora cached as JSON lines, keyed by the source files' checksum.

    Line 1 is a header {format, dataset, checksum, user_vocab, ...}, line 2 the
    item catalog and every further line one client.
    """

    def __init__(self, cache_dir):
        self.cache_dir = cache_dir

    def cache_file(self, dataset, digest, session_gap=None, max_session_len=None):
        return os.path.join(self.cache_dir, f"{dataset}-{digest[:16]}-{session_gap}-{max_session_len}.jsonl")

    def load_or_ingest(self, path, dataset, session_gap, max_session_len):
        digest = checksum(source_files(path, dataset))
        target = self.cache_file(dataset, digest, session_gap, max_session_len)
        if os.path.exists(target):
            corpus = self.load(target, expected_checksum=digest)
            if corpus is not None:
                logger.info("loaded cached corpus %s", target)
                return corpus, digest
        corpus = ingest(path, dataset, session_gap, max_session_len)
        self.save(corpus, target, digest)
        return corpus, digest

    def save(self, corpus, target, digest):
        os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
        header = {
            "format": CACHE_FORMAT_VERSION,
            "dataset": corpus.dataset,
            "checksum": digest,
            "user_vocab": list(corpus.user_vocab),
            "user_fields": list(corpus.user_fields),
            "item_fields": list(corpus.item_fields),
        }
        catalog = {
            "n_items": corpus.catalog.n_items,
            "item_vocab": list(corpus.catalog.item_vocab),
            "features": corpus.catalog.features.tolist(),
            "labels": list(corpus.item_labels),
        }
        with open(target, "w") as f:
            f.write(json.dumps(header) + "\n")
            f.write(json.dumps(catalog) + "\n")
            for c in corpus.clients:
                f.write(json.dumps({
                    "client_id": c.client_id,
                    "user_features": list(c.user_features),
                    "interactions": [[ex.item_id, ex.label, ex.timestamp] for ex in c.interactions],
                    "sessions": [list(s.item_ids) for s in c.sessions],
                }) + "\n")
        logger.info("cached corpus to %s", target)

    def load(self, target, expected_checksum=None):
        with open(target) as f:
            header = json.loads(f.readline())
            if header.get("format") != CACHE_FORMAT_VERSION:
                logger.warning("ignoring cache %s with format %s", target, header.get("format"))
                return None
            if expected_checksum and header.get("checksum") != expected_checksum:
                logger.warning("ignoring stale cache %s", target)
                return None
            raw = json.loads(f.readline())
            features = np.array(raw["features"], dtype=np.int64).reshape(raw["n_items"], len(raw["item_vocab"]))
            catalog = ItemCatalog(raw["n_items"], features, tuple(raw["item_vocab"]))
            clients = []
            for line in f:
                row = json.loads(line)
                user = tuple(row["user_features"])
                interactions = tuple(
                    Example(user, item_id, catalog.item(item_id).features, label, ts)
                    for item_id, label, ts in row["interactions"]
                )
                sessions = tuple(Session(tuple(catalog.items(ids))) for ids in row["sessions"])
                clients.append(ClientDataset(row["client_id"], user, interactions, sessions))
        return Corpus(header["dataset"], tuple(clients), catalog, tuple(header["user_vocab"]),
                      tuple(header["user_fields"]), tuple(header["item_fields"]), tuple(raw["labels"]))
