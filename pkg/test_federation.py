import os
from dataclasses import replace

import numpy as np
import pytest

from data import ClientDataset
from federation import (
    Delta, FederationConfig, FederationError, checkpoint_path, client_update, has_usable_data, local_batches,
    local_sgd, meta_update, personalize, sample_clients, train, usable_clients,
)
from linalg import RngStream
from model import grad_dssm, load_params, loss_dssm


def small_config(**overrides):
    cfg = FederationConfig(rounds=3, local_epochs=2, clients_per_round=5, local_lr=0.01, batch_size=8,
                           seed=5, negatives=2, ssl_negatives=2)
    return replace(cfg, **overrides)


def all_interactions(corpus):
    return [ex for c in corpus.clients for ex in c.interactions]


def test_sample_clients_is_distinct_and_seeded():
    a = sample_clients(RngStream(0, "sampling"), 20, 5)
    assert len(set(a)) == 5 and all(0 <= i < 20 for i in a)
    assert a == sample_clients(RngStream(0, "sampling"), 20, 5)
    assert sorted(sample_clients(RngStream(0, "sampling"), 4, 4)) == [0, 1, 2, 3]
    with pytest.raises(FederationError):
        sample_clients(RngStream(0, "sampling"), 4, 5)
    with pytest.raises(FederationError):
        sample_clients(RngStream(0, "sampling"), 4, 0)


def test_zero_local_rate_gives_zero_delta(theta, corpus):
    delta = client_update(theta, corpus.clients[0], small_config(local_lr=0.0), "dssm",
                          RngStream(0, "client", 0, 0), corpus.catalog)
    assert delta.norm == 0.0
    assert not delta.values.any()


def test_single_full_batch_step_is_a_gradient_step(theta, corpus):
    cfg = small_config(negatives=0, local_lr=0.05).single_step()
    client = corpus.clients[3]
    delta = client_update(theta, client, cfg, "dssm", RngStream(0, "client", 0, 3))
    expected = -0.05 * grad_dssm(theta, list(client.interactions)).flatten()
    assert np.allclose(delta.values, expected, atol=1e-12)
    assert delta.client_id == 3


def test_meta_update_moves_towards_mean_delta(theta):
    base = theta.flatten()
    d1 = Delta.of(np.full(base.size, 2.0))
    d2 = Delta.of(np.full(base.size, 4.0))
    updated = meta_update(theta, [d1, d2], 0.5)
    assert np.allclose(updated.flatten(), base + 1.5)
    assert np.allclose(meta_update(theta, [d1], 1.0).flatten(), base + 2.0)
    with pytest.raises(FederationError):
        meta_update(theta, [], 1.0)
    with pytest.raises(FederationError):
        meta_update(theta, [Delta.of(np.ones(3))], 1.0)


def test_zero_rounds_return_initial_parameters(theta, corpus):
    out, trace = train(corpus.clients, small_config(rounds=0), "dssm", theta, corpus.catalog, progress=False)
    assert np.array_equal(out.flatten(), theta.flatten())
    assert trace.empty
    assert list(trace.columns) == ["round", "mean_local_loss"]


def test_too_many_clients_per_round(theta, corpus):
    with pytest.raises(FederationError):
        train(corpus.clients[:3], small_config(), "dssm", theta, corpus.catalog, progress=False)


def test_thread_count_does_not_change_result(theta, corpus):
    single, trace1 = train(corpus.clients, small_config(threads=1), "joint", theta, corpus.catalog, progress=False)
    pooled, trace4 = train(corpus.clients, small_config(threads=4), "joint", theta, corpus.catalog, progress=False)
    assert np.array_equal(single.flatten(), pooled.flatten())
    assert trace1.equals(trace4)


def test_same_seed_same_model(theta, corpus):
    a, _ = train(corpus.clients, small_config(), "dssm", theta, corpus.catalog, progress=False)
    b, _ = train(corpus.clients, small_config(), "dssm", theta, corpus.catalog, progress=False)
    c, _ = train(corpus.clients, small_config(seed=6), "dssm", theta, corpus.catalog, progress=False)
    assert np.array_equal(a.flatten(), b.flatten())
    assert not np.array_equal(a.flatten(), c.flatten())


def test_training_reduces_loss_on_separable_clients(theta, corpus):
    cfg = small_config(rounds=20, local_epochs=5, negatives=0)
    before = loss_dssm(theta, all_interactions(corpus))
    trained, trace = train(corpus.clients, cfg, "dssm", theta, corpus.catalog, progress=False)
    assert loss_dssm(trained, all_interactions(corpus)) < before
    assert len(trace) == 20
    assert trace["mean_local_loss"].iloc[-1] < trace["mean_local_loss"].iloc[0]


def test_ssl_modes_train(theta, corpus):
    joint, _ = train(corpus.clients, small_config(), "joint", theta, corpus.catalog, progress=False)
    ssl, _ = train(corpus.clients, small_config(), "ssl-only", theta, corpus.catalog, progress=False)
    assert not np.array_equal(joint.flatten(), theta.flatten())
    assert not np.array_equal(ssl.flatten(), theta.flatten())
    # the supervised tower is untouched by SSL-only training
    assert np.array_equal(ssl["mlp.Wo"], theta["mlp.Wo"])
    with pytest.raises(FederationError):
        local_sgd(theta, corpus.clients[0], small_config(), "ssl-only")
    with pytest.raises(FederationError):
        local_sgd(theta, corpus.clients[0], small_config(), "adversarial", catalog=corpus.catalog)


def test_usable_clients_by_mode(corpus):
    client = corpus.clients[0]
    empty = ClientDataset(99, client.user_features, (), ())
    negatives_only = ClientDataset(98, client.user_features, tuple(ex for ex in client.interactions if not ex.label))
    assert has_usable_data(client, "ssl-only")
    assert not has_usable_data(negatives_only, "ssl-only")
    assert has_usable_data(negatives_only, "dssm")
    assert usable_clients([client, empty, negatives_only], "joint") == [client, negatives_only]


def test_checkpoints_are_written(tmp_path, theta, corpus):
    cfg = small_config(rounds=4, checkpoint_every=2)
    final, _ = train(corpus.clients, cfg, "dssm", theta, corpus.catalog, checkpoint_dir=str(tmp_path), progress=False)
    assert os.path.exists(checkpoint_path(str(tmp_path), 2))
    saved, manifest = load_params(checkpoint_path(str(tmp_path), 4))
    assert manifest["round"] == 4
    assert np.array_equal(saved.flatten(), final.flatten())


def test_personalize_fits_local_data(theta, corpus):
    local = corpus.clients[1].interactions[:4]
    cfg = small_config(local_epochs=10, negatives=0)
    adapted = personalize(theta, local, cfg)
    assert loss_dssm(adapted, list(local)) < loss_dssm(theta, list(local))
    with pytest.raises(FederationError):
        personalize(theta, [], cfg)


def test_sampling_is_uniform():
    rng = RngStream(9, "sampling")
    counts = np.zeros(20)
    rounds = 20_000
    for _ in range(rounds):
        counts[sample_clients(rng, 20, 2)] += 1
    q = 0.1
    stderr = np.sqrt(q * (1 - q) / rounds)
    assert np.all(np.abs(counts / rounds - q) < 3 * stderr + 1e-3)


def test_local_training_replays_step_by_step(theta, corpus):
    cfg = small_config(local_epochs=3, negatives=0, batch_size=3, local_lr=0.02)
    client = corpus.clients[4]
    delta = client_update(theta, client, cfg, "dssm", RngStream(1, "client", 0, 4))

    rng = RngStream(1, "client", 0, 4)
    manual = theta
    for _ in range(3):
        for batch in local_batches(list(client.interactions), 3, rng):
            manual = manual.add_scaled(grad_dssm(manual, batch), -0.02)
    assert np.array_equal(delta.values, manual.flatten() - theta.flatten())


def test_full_adoption_of_a_single_client(theta, corpus):
    cfg = small_config(clients_per_round=1, rounds=1, server_lr=1.0, negatives=0)
    trained, _ = train(corpus.clients, cfg, "dssm", theta, progress=False)
    chosen = sample_clients(RngStream(cfg.seed, "sampling"), len(corpus.clients), 1)[0]
    client = corpus.clients[chosen]
    adapted, _ = local_sgd(theta, client, cfg, "dssm", RngStream(cfg.seed, "client", 0, client.client_id))
    assert np.allclose(trained.flatten(), adapted.flatten(), rtol=0, atol=1e-12)


def test_users_with_different_data_adapt_differently(theta, corpus):
    cfg = small_config(negatives=0)
    a = personalize(theta, corpus.clients[0].interactions, cfg)
    b = personalize(theta, corpus.clients[1].interactions, cfg)
    assert not np.allclose(a.flatten(), b.flatten())
    unchanged = personalize(theta, corpus.clients[0].interactions, small_config(local_lr=0.0, negatives=0))
    assert np.array_equal(unchanged.flatten(), theta.flatten())
