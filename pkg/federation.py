"""Simulated federated training: client sampling, local SGD and the REPTILE meta update.

Each round samples M clients, runs ``client_update`` for each one from the
current global parameters, and moves the global parameters towards the
average adapted parameters:

    theta0 <- theta0 + alpha2 * mean(theta_tau - theta0)

Every client draws from its own stream keyed by (seed, round, client id) and
deltas are summed in ascending client-id order, so the result does not
depend on how many threads run the clients.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from tqdm import tqdm

from data import ClientDataset, client_views, sample_negatives
from linalg import RngStream, l2_norm
from model import LossWeights, dssm_value_and_grad, joint_value_and_grad, save_params, ssl_value_and_grad

logger = logging.getLogger(__name__)

MODES = ("dssm", "joint", "ssl-only")


class FederationError(ValueError):
    """Raised on invalid federation settings or clients with nothing to train on."""


@dataclass(frozen=True)
class FederationConfig:
    """Algorithm settings.

    rounds, local_epochs and clients_per_round are E1, E2 and M; local_lr and
    server_lr are alpha1 and alpha2.
    """

    rounds: int = 80
    local_epochs: int = 100
    clients_per_round: int = 20
    local_lr: float = 0.01
    server_lr: float = 1.0
    batch_size: int = 32
    seed: int = 0
    negatives: int = 4
    ssl_negatives: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    threads: int = 1
    checkpoint_every: int = 0

    def validate(self, n_clients=None):
        if self.rounds < 0:
            raise FederationError("rounds (E1) must be >= 0")
        for name in ("local_epochs", "clients_per_round", "batch_size", "threads"):
            if getattr(self, name) < 1:
                raise FederationError(f"{name} must be >= 1")
        if self.local_lr < 0 or self.server_lr <= 0:
            raise FederationError("learning rates must be positive")
        if self.negatives < 0 or self.ssl_negatives < 1:
            raise FederationError("negative counts out of range")
        if self.checkpoint_every < 0:
            raise FederationError("checkpoint_every must be >= 0")
        if n_clients is not None and self.clients_per_round > n_clients:
            raise FederationError(f"M={self.clients_per_round} exceeds the {n_clients} available clients")
        return self

    def single_step(self):
        """One full-batch local step per client (the plain FedSGD-style variant)."""
        return replace(self, local_epochs=1, batch_size=10 ** 9)


@dataclass(frozen=True)
class Delta:
    values: np.ndarray
    norm: float
    loss: float = float("nan")
    client_id: int = -1

    @classmethod
    def of(cls, values, loss=float("nan"), client_id=-1):
        return cls(values, l2_norm(values), loss, client_id)


def sample_clients(rng, n_total, m):
    """m distinct client indices drawn uniformly without replacement."""
    if not 1 <= m <= n_total:
        raise FederationError(f"cannot sample {m} of {n_total} clients")
    return [int(i) for i in rng.generator.choice(n_total, size=m, replace=False)]


def local_batches(examples, batch_size, rng):
    order = rng.generator.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _chunks(values, n):
    """Split ``values`` into n nearly equal consecutive pieces."""
    if n <= 0:
        return []
    bounds = np.linspace(0, len(values), n + 1).round().astype(int)
    return [values[bounds[i]:bounds[i + 1]] for i in range(n)]


def _local_examples(data, cfg, mode, rng, catalog):
    if mode == "ssl-only":
        return []
    examples = list(data.interactions)
    if catalog is not None and cfg.negatives > 0:
        examples += sample_negatives(data, catalog, cfg.negatives, rng)
    return examples


def has_usable_data(data, mode):
    if mode == "dssm":
        return bool(data.interactions)
    has_sessions = any(len(s) >= 2 for s in data.sessions)
    if mode == "ssl-only":
        return has_sessions
    return has_sessions or bool(data.interactions)


def usable_clients(clients, mode):
    """Clients that can run local training in ``mode``."""
    return [c for c in clients if has_usable_data(c, mode)]


def local_sgd(theta0, data, cfg, mode="dssm", rng=None, catalog=None):
    """Run E2 epochs of mini-batch SGD from theta0; returns (theta_tau, final-epoch mean loss)."""
    if mode not in MODES:
        raise FederationError(f"unknown training mode {mode!r}")
    if mode != "dssm" and catalog is None:
        raise FederationError(f"mode {mode!r} needs the item catalog to build SSL views")
    rng = rng or RngStream(cfg.seed, "client", data.client_id)

    examples = _local_examples(data, cfg, mode, rng, catalog)
    has_sessions = mode != "dssm" and any(len(s) >= 2 for s in data.sessions)
    if not examples and not has_sessions:
        raise FederationError(f"client {data.client_id} has no usable data for mode {mode!r}")

    theta = theta0
    epoch_losses = []
    for _ in range(cfg.local_epochs):
        batches = local_batches(examples, cfg.batch_size, rng) if examples else []
        views = client_views(data, rng, catalog, cfg.ssl_negatives) if has_sessions else []
        if batches:
            view_batches = _chunks(views, len(batches))
        else:
            view_batches = _chunks(views, max(1, -(-len(views) // cfg.batch_size)))
            batches = [[] for _ in view_batches]
        epoch_losses = []
        for batch, view_batch in zip(batches, view_batches):
            if mode == "dssm":
                loss, grad = dssm_value_and_grad(theta, batch)
            elif mode == "ssl-only":
                if not view_batch:
                    continue
                loss, grad = ssl_value_and_grad(theta, view_batch, cfg.weights)
            else:
                if not batch and not view_batch:
                    continue
                loss, grad = joint_value_and_grad(theta, batch, view_batch, cfg.weights)
            theta = theta.add_scaled(grad, -cfg.local_lr)
            epoch_losses.append(loss)

    loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
    return theta, loss


def client_update(theta0, data, cfg, mode="dssm", rng=None, catalog=None):
    """theta_tau - theta0 after local training, with the local loss attached."""
    theta, loss = local_sgd(theta0, data, cfg, mode, rng, catalog)
    return Delta.of(theta.flatten() - theta0.flatten(), loss, data.client_id)


def meta_update(theta0, deltas, alpha2):
    if not deltas:
        raise FederationError("meta update needs at least one delta")
    size = theta0.size
    total = np.zeros(size)
    for d in deltas:
        if d.values.shape != (size,):
            raise FederationError(f"delta of length {d.values.size} does not match {size} parameters")
        total += d.values
    return theta0.with_vector(theta0.flatten() + alpha2 * total / len(deltas))


def run_round(theta, clients, chosen, cfg, mode, round_index, catalog=None, postprocess=None, executor=None):
    """client_update for every chosen client index; deltas come back in ascending client-id order."""
    chosen = sorted(chosen, key=lambda i: clients[i].client_id)

    def task(i):
        client = clients[i]
        rng = RngStream(cfg.seed, "client", round_index, client.client_id)
        delta = client_update(theta, client, cfg, mode, rng, catalog)
        return postprocess(delta) if postprocess else delta

    if executor is None:
        return [task(i) for i in chosen]
    return list(executor.map(task, chosen))


def _trace_frame(losses):
    return pd.DataFrame({"round": np.arange(1, len(losses) + 1, dtype=int), "mean_local_loss": losses},
                        columns=["round", "mean_local_loss"])


def checkpoint_path(directory, round_number):
    return os.path.join(directory, f"round_{round_number:05d}.params")


def train(clients, cfg, mode, theta0, catalog=None, checkpoint_dir=None, progress=True):
    """The federated meta-learning loop. Returns (theta, loss trace frame)."""
    clients = list(clients)
    cfg.validate(len(clients))
    sampler = RngStream(cfg.seed, "sampling")
    theta = theta0
    losses = []
    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for r in tqdm(range(cfg.rounds), desc=f"train[{mode}]", disable=not progress):
            chosen = sample_clients(sampler, len(clients), cfg.clients_per_round)
            deltas = run_round(theta, clients, chosen, cfg, mode, r, catalog, executor=executor)
            theta = meta_update(theta, deltas, cfg.server_lr)
            losses.append(float(np.nanmean([d.loss for d in deltas])))
            logger.debug("round %d: mean local loss %.5f", r + 1, losses[-1])
            if checkpoint_dir and cfg.checkpoint_every and (r + 1) % cfg.checkpoint_every == 0:
                save_params(theta, checkpoint_path(checkpoint_dir, r + 1), {"round": r + 1, "mode": mode})
    finally:
        if executor is not None:
            executor.shutdown()
    return theta, _trace_frame(losses)


def personalize(theta, local_train, cfg, catalog=None, rng=None, mode="dssm"):
    """Adapt theta to one user's local examples; returns the adapted parameters."""
    local_train = list(local_train)
    if not local_train:
        raise FederationError("cannot personalize on an empty local set")
    data = ClientDataset(-1, local_train[0].user_features, tuple(local_train), ())
    adapted, _ = local_sgd(theta, data, cfg, mode, rng or RngStream(cfg.seed, "personalize"), catalog)
    return adapted
