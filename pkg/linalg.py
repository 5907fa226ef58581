"""Dense arithmetic, seeded RNG streams and closed-form layer backward passes.

Everything is float64. Matrices are plain 2-D numpy arrays that are marked
read-only once built through ``as_matrix``; layer helpers return new arrays
and never mutate their inputs.
"""

import zlib

import numpy as np


class LinalgError(ValueError):
    """Raised on dimension mismatches, non-finite input or bad distribution parameters."""


def as_matrix(values, rows=None, cols=None):
    """Build an immutable row-major DenseMatrix from nested lists or flat data."""
    data = np.array(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if data.size != rows * cols:
            raise LinalgError(f"expected {rows * cols} values for a {rows}x{cols} matrix, got {data.size}")
        data = data.reshape(rows, cols)
    if data.ndim != 2:
        raise LinalgError(f"a matrix needs 2 dimensions, got {data.ndim}")
    if not np.all(np.isfinite(data)):
        raise LinalgError("matrix entries must be finite")
    data.setflags(write=False)
    return data


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise LinalgError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise LinalgError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise LinalgError("matmul produced non-finite values")
    return out


def l2_norm(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    if not np.all(np.isfinite(v)):
        raise LinalgError("l2_norm of a vector with non-finite entries")
    return float(np.linalg.norm(v))


class RngStream:
    """A labeled, keyed substream of one master seed.

    The generator state depends only on (seed, stream_id, keys), so draws on
    one stream never perturb another and derived client streams are the same
    however the work is scheduled.
    """

    def __init__(self, seed, stream_id, *keys):
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        self.keys = tuple(int(k) for k in keys)
        label = zlib.crc32(self.stream_id.encode("utf-8"))
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, label, *[k & 0xFFFFFFFF for k in self.keys]]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *keys):
        return RngStream(self.seed, self.stream_id, *self.keys, *keys)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r}, keys={self.keys})"


def gaussian_draw(rng, sigma, n):
    if sigma < 0:
        raise LinalgError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros(n)
    return rng.generator.normal(0.0, sigma, size=n)


def laplace_draw(rng, scale, n):
    if scale < 0:
        raise LinalgError(f"Laplace scale must be >= 0, got {scale}")
    if scale == 0:
        return np.zeros(n)
    return rng.generator.laplace(0.0, scale, size=n)


# --- activations -----------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(pre_activation, grad_out):
    return grad_out * (pre_activation > 0)


def sigmoid_backward(activated, grad_out):
    return grad_out * activated * (1.0 - activated)


def logsumexp(scores):
    scores = np.asarray(scores, dtype=np.float64)
    top = np.max(scores)
    if top == -np.inf:
        return -np.inf
    return float(top + np.log(np.sum(np.exp(scores - top))))


def softmax(scores):
    scores = np.asarray(scores, dtype=np.float64)
    shifted = np.exp(scores - np.max(scores))
    return shifted / shifted.sum()


def softmax_cross_entropy(scores, positive_index):
    """-log softmax(scores)[positive_index]; -inf scores drop out of the sum."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise LinalgError("softmax over an empty score vector")
    return logsumexp(scores) - float(scores[positive_index])


# --- layers ----------------------------------------------------------------

def affine(x, w, b):
    """x @ w + b for a batch of rows (or a single vector)."""
    return x @ w + b


def affine_backward(x, w, grad_out):
    """Gradients of affine(x, w, b) w.r.t. (x, w, b) given dL/d(out)."""
    if grad_out.ndim == 1:
        return w @ grad_out, np.outer(x, grad_out), grad_out.copy()
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def gru_step(x, h, p):
    """One GRU step. ``p`` maps Wz/Uz/bz, Wr/Ur/br, Wn/Un/bn to arrays.

    z = s(xWz + hUz + bz), r = s(xWr + hUr + br),
    n = tanh(xWn + (r*h)Un + bn), h' = (1-z)*n + z*h
    """
    z = sigmoid(x @ p["Wz"] + h @ p["Uz"] + p["bz"])
    r = sigmoid(x @ p["Wr"] + h @ p["Ur"] + p["br"])
    n = np.tanh(x @ p["Wn"] + (r * h) @ p["Un"] + p["bn"])
    h_next = (1.0 - z) * n + z * h
    return h_next, (x, h, z, r, n)


def gru_step_backward(cache, grad_h_next, p, grads):
    """Accumulate parameter gradients into ``grads``; return (dx, dh_prev)."""
    x, h, z, r, n = cache
    dn = grad_h_next * (1.0 - z)
    dz = grad_h_next * (h - n)
    dh_prev = grad_h_next * z

    da_n = dn * (1.0 - n * n)
    grads["Wn"] += np.outer(x, da_n)
    grads["Un"] += np.outer(r * h, da_n)
    grads["bn"] += da_n
    dx = p["Wn"] @ da_n
    d_rh = p["Un"] @ da_n
    dr = d_rh * h
    dh_prev += d_rh * r

    da_z = dz * z * (1.0 - z)
    grads["Wz"] += np.outer(x, da_z)
    grads["Uz"] += np.outer(h, da_z)
    grads["bz"] += da_z
    dx += p["Wz"] @ da_z
    dh_prev += p["Uz"] @ da_z

    da_r = dr * r * (1.0 - r)
    grads["Wr"] += np.outer(x, da_r)
    grads["Ur"] += np.outer(h, da_r)
    grads["br"] += da_r
    dx += p["Wr"] @ da_r
    dh_prev += p["Ur"] @ da_r
    return dx, dh_prev
