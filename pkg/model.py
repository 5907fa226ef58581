"""Two-tower recommendation network with a GRU session encoder.

User tower: one embedding table per categorical user feature (no user id).
Item tower: item-id embedding concatenated with one table per item feature.
The concatenation [u, v] feeds N hidden layers and a sigmoid output. The GRU
encoder f_Sigma reads item-tower vectors; f_psi is one affine layer over the
item-tower vector. All losses are minimised and every gradient is computed
with closed-form layer backward passes from ``linalg``.
"""

import json
import logging
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from linalg import (
    affine,
    affine_backward,
    gru_step,
    gru_step_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    softmax,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
GRU_KEYS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wn", "Un", "bn")
CHECKPOINT_MAGIC = b"PRVR"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Raised on vocabulary violations, empty inputs or malformed views."""


# --- data types ------------------------------------------------------------

class Item(NamedTuple):
    item_id: int
    features: tuple


@dataclass(frozen=True)
class Example:
    user_features: tuple
    item_id: int
    item_features: tuple
    label: int
    timestamp: Optional[float] = None

    @property
    def item(self):
        return Item(self.item_id, self.item_features)


@dataclass(frozen=True)
class Session:
    items: tuple

    def __len__(self):
        return len(self.items)

    @property
    def item_ids(self):
        return tuple(item.item_id for item in self.items)


@dataclass(frozen=True)
class ItemMaskedView:
    """Session with one position replaced by a negative; predict the original item."""
    session: Session
    positive: Item
    candidates: tuple
    position: int = 0


@dataclass(frozen=True)
class SegmentMaskedView:
    """Session with a span replaced by a negative segment; predict the original span."""
    session: Session
    positive: Session
    candidates: tuple
    start: int = 0


@dataclass(frozen=True)
class Vocabulary:
    user_vocab: tuple
    item_vocab: tuple
    n_items: int


@dataclass(frozen=True)
class LossWeights:
    im: float = 1.0
    sm: float = 1.0
    dssm: float = 1.0


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 64
    hidden_dims: tuple = (128, 64, 32, 16)
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def validate(self):
        if self.embedding_dim < 1:
            raise ModelError("embedding_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ModelError("hidden layer sizes must be >= 1")
        if self.hidden_activation not in ("relu", "sigmoid"):
            raise ModelError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation != "sigmoid":
            # explicit-rating (linear) output is a config stub only
            raise ModelError(f"output activation {self.output_activation!r} is not supported")


# --- parameters ------------------------------------------------------------

class ParamSet:
    """Every trainable tensor of the network, in a fixed order."""

    def __init__(self, arrays, meta=None):
        self.arrays = {name: np.asarray(value, dtype=np.float64) for name, value in arrays.items()}
        self.meta = dict(meta or {})

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    @property
    def layout(self):
        return tuple((name, tuple(a.shape)) for name, a in self.arrays.items())

    @property
    def size(self):
        return int(sum(a.size for a in self.arrays.values()))

    @property
    def n_user_fields(self):
        return sum(1 for name in self.arrays if name.startswith("user_emb."))

    @property
    def n_item_fields(self):
        return sum(1 for name in self.arrays if name.startswith("item_emb."))

    @property
    def n_hidden(self):
        return sum(1 for name in self.arrays if name.startswith("mlp.W") and name != "mlp.Wo")

    @property
    def embedding_dim(self):
        return self.arrays["item_id_emb"].shape[1]

    @property
    def hidden_activation(self):
        return self.meta.get("hidden_activation", "relu")

    def flatten(self):
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    @classmethod
    def unflatten(cls, layout, vector, meta=None):
        vector = np.asarray(vector, dtype=np.float64)
        expected = sum(int(np.prod(shape)) for _, shape in layout)
        if vector.size != expected:
            raise ModelError(f"vector of length {vector.size} does not fit {expected} parameters")
        arrays, offset = {}, 0
        for name, shape in layout:
            count = int(np.prod(shape))
            arrays[name] = vector[offset:offset + count].reshape(shape).copy()
            offset += count
        return cls(arrays, meta)

    def with_vector(self, vector):
        return ParamSet.unflatten(self.layout, vector, self.meta)

    def zeros_like(self):
        return ParamSet({name: np.zeros_like(a) for name, a in self.arrays.items()}, self.meta)

    def add_scaled(self, other, alpha):
        """self + alpha * other as a new ParamSet."""
        return ParamSet({name: a + alpha * other.arrays[name] for name, a in self.arrays.items()}, self.meta)

    def gru(self):
        return {key: self.arrays[f"gru.{key}"] for key in GRU_KEYS}


def _glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.generator.uniform(-limit, limit, size=(rows, cols))


def init_params(dims, vocab, rng):
    """Glorot-uniform weights and zero biases for the given dims and vocabularies."""
    dims.validate()
    d = dims.embedding_dim
    arrays = {}
    for k, size in enumerate(vocab.user_vocab):
        arrays[f"user_emb.{k}"] = _glorot(rng, size, d)
    arrays["item_id_emb"] = _glorot(rng, vocab.n_items, d)
    for k, size in enumerate(vocab.item_vocab):
        arrays[f"item_emb.{k}"] = _glorot(rng, size, d)

    width = d * (len(vocab.user_vocab) + 1 + len(vocab.item_vocab))
    for i, hidden in enumerate(dims.hidden_dims, start=1):
        arrays[f"mlp.W{i}"] = _glorot(rng, width, hidden)
        arrays[f"mlp.b{i}"] = np.zeros(hidden)
        width = hidden
    arrays["mlp.Wo"] = _glorot(rng, width, 1)
    arrays["mlp.bo"] = np.zeros(1)

    item_width = d * (1 + len(vocab.item_vocab))
    for gate in "zrn":
        arrays[f"gru.W{gate}"] = _glorot(rng, item_width, d)
        arrays[f"gru.U{gate}"] = _glorot(rng, d, d)
        arrays[f"gru.b{gate}"] = np.zeros(d)
    arrays["psi.W"] = _glorot(rng, item_width, d)
    arrays["psi.b"] = np.zeros(d)
    # keep insertion order identical to the checkpoint layout
    ordered = {name: arrays[name] for name in _ordered_names(arrays)}
    return ParamSet(ordered, {"hidden_activation": dims.hidden_activation})


def _ordered_names(arrays):
    head = [n for n in arrays if n.startswith("user_emb.")] + ["item_id_emb"]
    head += [n for n in arrays if n.startswith("item_emb.")]
    mlp = [n for n in arrays if n.startswith("mlp.") and n not in ("mlp.Wo", "mlp.bo")]
    tail = ["mlp.Wo", "mlp.bo"] + [f"gru.{k}" for k in GRU_KEYS] + ["psi.W", "psi.b"]
    return head + mlp + tail


# --- towers ----------------------------------------------------------------

def _lookup(table, index, what):
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ModelError(f"{what} index out of vocabulary (size {table.shape[0]})")
    return table[index]


def _user_vectors(theta, user_features):
    fields = theta.n_user_fields
    if user_features.shape[1] != fields:
        raise ModelError(f"expected {fields} user features, got {user_features.shape[1]}")
    parts = [_lookup(theta[f"user_emb.{k}"], user_features[:, k], f"user feature {k}") for k in range(fields)]
    if not parts:
        return np.zeros((user_features.shape[0], 0))
    return np.concatenate(parts, axis=1)


def _item_vectors(theta, item_ids, item_features):
    fields = theta.n_item_fields
    if item_features.shape[1] != fields:
        raise ModelError(f"expected {fields} item features, got {item_features.shape[1]}")
    parts = [_lookup(theta["item_id_emb"], item_ids, "item id")]
    parts += [_lookup(theta[f"item_emb.{k}"], item_features[:, k], f"item feature {k}") for k in range(fields)]
    return np.concatenate(parts, axis=1)


def _scatter_user(grad, user_features, d_user):
    d = grad.embedding_dim
    for k in range(grad.n_user_fields):
        np.add.at(grad[f"user_emb.{k}"], user_features[:, k], d_user[:, k * d:(k + 1) * d])


def _scatter_item(grad, item_ids, item_features, d_item):
    d = grad.embedding_dim
    np.add.at(grad["item_id_emb"], item_ids, d_item[:, :d])
    for k in range(grad.n_item_fields):
        np.add.at(grad[f"item_emb.{k}"], item_features[:, k], d_item[:, (k + 1) * d:(k + 2) * d])


def _int_matrix(rows):
    arr = np.array(rows, dtype=np.int64)
    if arr.ndim != 2:
        arr = arr.reshape(len(rows), 0)
    return arr


def _item_arrays(items):
    ids = np.array([item.item_id for item in items], dtype=np.int64)
    feats = _int_matrix([tuple(item.features) for item in items])
    return ids, feats


def _batch_arrays(examples):
    users = _int_matrix([tuple(ex.user_features) for ex in examples])
    ids, feats = _item_arrays([ex.item for ex in examples])
    labels = np.array([ex.label for ex in examples], dtype=np.float64)
    return users, ids, feats, labels


# --- DSSM ------------------------------------------------------------------

def _mlp_forward(theta, x0):
    acts, pres = [x0], []
    x = x0
    for i in range(1, theta.n_hidden + 1):
        a = affine(x, theta[f"mlp.W{i}"], theta[f"mlp.b{i}"])
        pres.append(a)
        x = relu(a) if theta.hidden_activation == "relu" else sigmoid(a)
        acts.append(x)
    logit = affine(x, theta["mlp.Wo"], theta["mlp.bo"])[:, 0]
    return logit, (acts, pres)


def _dssm_logits(theta, users, ids, feats):
    u = _user_vectors(theta, users)
    v = _item_vectors(theta, ids, feats)
    x0 = np.concatenate([u, v], axis=1)
    logit, cache = _mlp_forward(theta, x0)
    return logit, (u.shape[1], cache)


def forward_batch(theta, examples):
    users, ids, feats, _ = _batch_arrays(examples)
    logit, _ = _dssm_logits(theta, users, ids, feats)
    return sigmoid(logit)


def forward(theta, ex):
    """Predicted preference of ex.user for ex.item, strictly inside (0, 1)."""
    return float(np.clip(forward_batch(theta, [ex])[0], PROB_FLOOR, 1.0 - PROB_FLOOR))


def score_items(theta, user_features, items):
    """Ranking scores (output logits) of one user against many items."""
    if not items:
        return np.zeros(0)
    ids, feats = _item_arrays(items)
    users = _int_matrix([tuple(user_features)] * len(items))
    logit, _ = _dssm_logits(theta, users, ids, feats)
    return logit


def item_tower(theta, items):
    """Item-tower vectors [id embedding, feature embeddings] for each item."""
    if not items:
        return np.zeros((0, theta.embedding_dim * (1 + theta.n_item_fields)))
    ids, feats = _item_arrays(items)
    return _item_vectors(theta, ids, feats)


def dssm_value_and_grad(theta, batch, need_grad=True):
    if not batch:
        raise ModelError("DSSM loss over an empty batch")
    users, ids, feats, labels = _batch_arrays(batch)
    if np.any((labels != 0) & (labels != 1)):
        raise ModelError("labels must be binary")
    logit, (d_user, (acts, pres)) = _dssm_logits(theta, users, ids, feats)
    p = sigmoid(logit)
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = float(-np.sum(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)))
    if not need_grad:
        return loss, None

    grad = theta.zeros_like()
    clamped = (p < PROB_FLOOR) | (p > 1.0 - PROB_FLOOR)
    g = np.where(clamped, 0.0, p - labels)[:, None]
    dx, grad["mlp.Wo"][...], grad["mlp.bo"][...] = affine_backward(acts[-1], theta["mlp.Wo"], g)
    for i in range(theta.n_hidden, 0, -1):
        if theta.hidden_activation == "relu":
            da = relu_backward(pres[i - 1], dx)
        else:
            da = sigmoid_backward(acts[i], dx)
        dx, grad[f"mlp.W{i}"][...], grad[f"mlp.b{i}"][...] = affine_backward(acts[i - 1], theta[f"mlp.W{i}"], da)
    _scatter_user(grad, users, dx[:, :d_user])
    _scatter_item(grad, ids, feats, dx[:, d_user:])
    return loss, grad


def loss_dssm(theta, batch):
    return dssm_value_and_grad(theta, batch, need_grad=False)[0]


def grad_dssm(theta, batch):
    return dssm_value_and_grad(theta, batch)[1]


# --- session encoder -------------------------------------------------------

def _encode(theta, session):
    if len(session) == 0:
        raise ModelError("cannot encode an empty session")
    ids, feats = _item_arrays(session.items)
    xs = _item_vectors(theta, ids, feats)
    p = theta.gru()
    h = np.zeros(theta.embedding_dim)
    caches = []
    for x in xs:
        h, cache = gru_step(x, h, p)
        caches.append(cache)
    return h, (ids, feats, caches)


def _encode_backward(theta, cache, dh, grad):
    ids, feats, caches = cache
    p = theta.gru()
    gru_grads = {key: grad[f"gru.{key}"] for key in GRU_KEYS}
    dxs = np.zeros((len(caches), caches[0][0].size))
    for t in range(len(caches) - 1, -1, -1):
        dxs[t], dh = gru_step_backward(caches[t], dh, p, gru_grads)
    _scatter_item(grad, ids, feats, dxs)


def encode_session(theta, s):
    """f_Sigma(X): GRU hidden state after the last item, from a zero initial state."""
    return _encode(theta, s)[0]


def _psi(theta, items):
    ids, feats = _item_arrays(items)
    vecs = _item_vectors(theta, ids, feats)
    return affine(vecs, theta["psi.W"], theta["psi.b"]), (ids, feats, vecs)


def _positive_index(candidates, positive, what):
    for index, candidate in enumerate(candidates):
        if candidate == positive:
            return index
    raise ModelError(f"positive {what} is absent from the candidate set")


def item_masked_value_and_grad(theta, view, need_grad=True):
    if not view.candidates:
        raise ModelError("empty candidate set")
    pos = _positive_index(view.candidates, view.positive, "item")
    h, enc_cache = _encode(theta, view.session)
    psi, (ids, feats, vecs) = _psi(theta, list(view.candidates))
    scores = psi @ h
    loss = softmax_cross_entropy(scores, pos)
    if not need_grad:
        return loss, None
    grad = theta.zeros_like()
    ds = softmax(scores)
    ds[pos] -= 1.0
    dh = psi.T @ ds
    dpsi = np.outer(ds, h)
    d_vecs, grad["psi.W"][...], grad["psi.b"][...] = affine_backward(vecs, theta["psi.W"], dpsi)
    _scatter_item(grad, ids, feats, d_vecs)
    _encode_backward(theta, enc_cache, dh, grad)
    return loss, grad


def segment_masked_value_and_grad(theta, view, need_grad=True):
    if not view.candidates:
        raise ModelError("empty negative segment set")
    pos = _positive_index(view.candidates, view.positive, "segment")
    h, enc_cache = _encode(theta, view.session)
    encoded = [_encode(theta, segment) for segment in view.candidates]
    seg = np.stack([e[0] for e in encoded])
    scores = seg @ h
    loss = softmax_cross_entropy(scores, pos)
    if not need_grad:
        return loss, None
    grad = theta.zeros_like()
    ds = softmax(scores)
    ds[pos] -= 1.0
    _encode_backward(theta, enc_cache, seg.T @ ds, grad)
    for weight, (_, cache) in zip(ds, encoded):
        _encode_backward(theta, cache, weight * h, grad)
    return loss, grad


def loss_item_masked(theta, view):
    return item_masked_value_and_grad(theta, view, need_grad=False)[0]


def loss_segment_masked(theta, view):
    return segment_masked_value_and_grad(theta, view, need_grad=False)[0]


def grad_item_masked(theta, view):
    return item_masked_value_and_grad(theta, view)[1]


def grad_segment_masked(theta, view):
    return segment_masked_value_and_grad(theta, view)[1]


# --- combined objectives ---------------------------------------------------

def _accumulate(total, part, weight):
    for name, value in part.arrays.items():
        total.arrays[name] += weight * value


def ssl_value_and_grad(theta, views, weights=LossWeights(), need_grad=True):
    """lambda_IM * mean L_IM + lambda_SM * mean L_SM over the given views."""
    item_views = [v for v in views if isinstance(v, ItemMaskedView)]
    segment_views = [v for v in views if isinstance(v, SegmentMaskedView)]
    loss = 0.0
    grad = theta.zeros_like() if need_grad else None
    for group, weight, fn in (
        (item_views, weights.im, item_masked_value_and_grad),
        (segment_views, weights.sm, segment_masked_value_and_grad),
    ):
        if not group or weight == 0:
            continue
        scale = weight / len(group)
        for view in group:
            value, g = fn(theta, view, need_grad)
            loss += scale * value
            if need_grad:
                _accumulate(grad, g, scale)
    return loss, grad


def loss_ssl(theta, views, weights=LossWeights()):
    return ssl_value_and_grad(theta, views, weights, need_grad=False)[0]


def grad_ssl(theta, views, weights=LossWeights()):
    return ssl_value_and_grad(theta, views, weights)[1]


def joint_value_and_grad(theta, batch, views, weights=LossWeights(), need_grad=True):
    """lambda_DSSM * L_DSSM + L_SSL; an empty batch drops the supervised term."""
    loss, grad = ssl_value_and_grad(theta, views, weights, need_grad)
    if batch and weights.dssm != 0:
        value, g = dssm_value_and_grad(theta, batch, need_grad)
        loss += weights.dssm * value
        if need_grad:
            _accumulate(grad, g, weights.dssm)
    return loss, grad


def loss_joint(theta, batch, views, weights=LossWeights()):
    return joint_value_and_grad(theta, batch, views, weights, need_grad=False)[0]


def grad_joint(theta, batch, views, weights=LossWeights()):
    return joint_value_and_grad(theta, batch, views, weights)[1]


# --- checkpoints -----------------------------------------------------------

def save_params(theta, path, manifest=None):
    """Write header (shape manifest as JSON) followed by little-endian float64 values."""
    header = {
        "layout": [[name, list(shape)] for name, shape in theta.layout],
        "meta": theta.meta,
        "manifest": manifest or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(theta.flatten().astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ModelError(f"{path} is not a parameter checkpoint")
        version, length = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(length).decode("utf-8"))
        values = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
    theta = ParamSet.unflatten(layout, values, header.get("meta"))
    return theta, header.get("manifest", {})
