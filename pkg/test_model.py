import numpy as np
import pytest

from linalg import RngStream, gru_step
from model import (
    Example, ItemMaskedView, LossWeights, ModelConfig, ModelError, ParamSet, Session, SegmentMaskedView,
    encode_session, forward, forward_batch, grad_dssm, grad_item_masked, grad_joint, grad_segment_masked,
    grad_ssl, init_params, item_tower, load_params, loss_dssm, loss_item_masked, loss_joint, loss_segment_masked,
    loss_ssl, save_params, score_items,
)


def numeric_gradient(theta, fn, eps=1e-6):
    base = theta.flatten()
    out = np.zeros_like(base)
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += eps
        down[i] -= eps
        out[i] = (fn(theta.with_vector(up)) - fn(theta.with_vector(down))) / (2 * eps)
    return out


def assert_gradient_matches(theta, loss_fn, grad_fn):
    analytic = grad_fn(theta).flatten()
    numeric = numeric_gradient(theta, loss_fn)
    assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


@pytest.fixture(params=["relu", "sigmoid"])
def tiny_theta(request, tiny_vocab):
    dims = ModelConfig(embedding_dim=2, hidden_dims=(2,), hidden_activation=request.param)
    return init_params(dims, tiny_vocab, RngStream(11, "init"))


@pytest.fixture
def batch():
    return [
        Example((0, 1), 1, (1,), 1),
        Example((1, 2), 3, (1,), 0),
        Example((0, 0), 4, (0,), 1),
    ]


@pytest.fixture
def item_view(items):
    masked = Session((items[0], items[5], items[2], items[3]))
    return ItemMaskedView(masked, items[1], (items[1], items[5], items[4]), position=1)


@pytest.fixture
def segment_view(items):
    positive = Session((items[1], items[2]))
    masked = Session((items[0], items[4], items[5], items[3]))
    return SegmentMaskedView(masked, positive, (positive, Session((items[4], items[5]))), start=1)


def test_init_params_layout(tiny_theta, tiny_vocab):
    assert tiny_theta.names()[:3] == ["user_emb.0", "user_emb.1", "item_id_emb"]
    assert tiny_theta["item_id_emb"].shape == (6, 2)
    assert tiny_theta["mlp.W1"].shape == (8, 2)
    assert tiny_theta["gru.Wz"].shape == (4, 2)
    assert not tiny_theta["mlp.b1"].any()
    again = init_params(ModelConfig(2, (2,), tiny_theta.hidden_activation), tiny_vocab, RngStream(11, "init"))
    assert np.array_equal(again.flatten(), tiny_theta.flatten())


def test_flatten_unflatten_keeps_order(tiny_theta):
    vector = np.arange(tiny_theta.size, dtype=float)
    rebuilt = tiny_theta.with_vector(vector)
    assert np.array_equal(rebuilt.flatten(), vector)
    assert rebuilt.layout == tiny_theta.layout
    with pytest.raises(ModelError):
        ParamSet.unflatten(tiny_theta.layout, vector[:-1])


def test_forward_is_a_probability(tiny_theta, batch):
    p = forward_batch(tiny_theta, batch)
    assert p.shape == (3,)
    assert np.all((p > 0) & (p < 1))
    assert 0 < forward(tiny_theta, batch[0]) < 1


def test_score_items_orders_like_forward(tiny_theta, items):
    scores = score_items(tiny_theta, (1, 2), items)
    probs = forward_batch(tiny_theta, [Example((1, 2), it.item_id, it.features, 0) for it in items])
    assert np.array_equal(np.argsort(scores), np.argsort(probs))
    assert item_tower(tiny_theta, items[:3]).shape == (3, 4)


def test_out_of_vocabulary_is_rejected(tiny_theta):
    with pytest.raises(ModelError):
        forward(tiny_theta, Example((0, 3), 1, (1,), 1))
    with pytest.raises(ModelError):
        forward(tiny_theta, Example((0, 1), 6, (1,), 1))


def test_dssm_loss_matches_binary_cross_entropy(tiny_theta, batch):
    p = forward_batch(tiny_theta, batch)
    labels = np.array([ex.label for ex in batch])
    expected = -np.sum(labels * np.log(p) + (1 - labels) * np.log(1 - p))
    assert loss_dssm(tiny_theta, batch) == pytest.approx(expected)
    with pytest.raises(ModelError):
        loss_dssm(tiny_theta, [])
    with pytest.raises(ModelError):
        loss_dssm(tiny_theta, [Example((0, 1), 1, (1,), 2)])


def test_dssm_gradient(tiny_theta, batch):
    assert_gradient_matches(tiny_theta, lambda t: loss_dssm(t, batch), lambda t: grad_dssm(t, batch))


def test_item_masked_gradient(tiny_theta, item_view):
    assert_gradient_matches(tiny_theta, lambda t: loss_item_masked(t, item_view),
                            lambda t: grad_item_masked(t, item_view))


def test_segment_masked_gradient(tiny_theta, segment_view):
    assert_gradient_matches(tiny_theta, lambda t: loss_segment_masked(t, segment_view),
                            lambda t: grad_segment_masked(t, segment_view))


def test_joint_gradient(tiny_theta, batch, item_view, segment_view):
    weights = LossWeights(im=0.5, sm=2.0, dssm=1.5)
    views = [item_view, segment_view]
    assert_gradient_matches(tiny_theta, lambda t: loss_joint(t, batch, views, weights),
                            lambda t: grad_joint(t, batch, views, weights))


def test_joint_is_weighted_sum(tiny_theta, batch, item_view, segment_view):
    weights = LossWeights(im=0.5, sm=2.0, dssm=1.5)
    expected = (0.5 * loss_item_masked(tiny_theta, item_view)
                + 2.0 * loss_segment_masked(tiny_theta, segment_view)
                + 1.5 * loss_dssm(tiny_theta, batch))
    assert loss_joint(tiny_theta, batch, [item_view, segment_view], weights) == pytest.approx(expected)
    assert loss_joint(tiny_theta, [], [item_view], weights) == pytest.approx(0.5 * loss_item_masked(tiny_theta, item_view))
    assert loss_ssl(tiny_theta, [], weights) == 0.0
    assert not grad_ssl(tiny_theta, [], weights).flatten().any()


def test_uniform_candidates_give_log_count_loss(tiny_theta, items):
    zeroed = tiny_theta.zeros_like()
    view = ItemMaskedView(Session((items[0], items[2])), items[1], (items[1], items[3], items[4], items[5]))
    assert loss_item_masked(zeroed, view) == pytest.approx(np.log(4))


def test_malformed_views_are_rejected(tiny_theta, items):
    with pytest.raises(ModelError):
        loss_item_masked(tiny_theta, ItemMaskedView(Session((items[0],)), items[1], (items[2], items[3])))
    with pytest.raises(ModelError):
        loss_item_masked(tiny_theta, ItemMaskedView(Session((items[0],)), items[1], ()))
    with pytest.raises(ModelError):
        encode_session(tiny_theta, Session(()))


def test_encode_session_depends_on_order(tiny_theta, items):
    a = encode_session(tiny_theta, Session((items[0], items[1])))
    b = encode_session(tiny_theta, Session((items[1], items[0])))
    assert a.shape == (2,)
    assert not np.allclose(a, b)


def item_input(theta, item):
    return np.concatenate([theta["item_id_emb"][item.item_id], theta["item_emb.0"][item.features[0]]])


def test_single_item_session_is_one_gru_step(tiny_theta, items):
    h, _ = gru_step(item_input(tiny_theta, items[3]), np.zeros(2), tiny_theta.gru())
    assert np.allclose(encode_session(tiny_theta, Session((items[3],))), h, rtol=0, atol=1e-12)


def test_session_encoding_unrolls_the_gru(tiny_theta, items):
    session = Session((items[2], items[0], items[5]))
    h = np.zeros(2)
    for item in session.items:
        h, _ = gru_step(item_input(tiny_theta, item), h, tiny_theta.gru())
    assert np.allclose(encode_session(tiny_theta, session), h, rtol=0, atol=1e-12)


def test_unsupported_activations():
    with pytest.raises(ModelError):
        ModelConfig(output_activation="linear").validate()
    with pytest.raises(ModelError):
        ModelConfig(hidden_activation="tanh").validate()


def test_checkpoint_round_trip(tmp_path, tiny_theta):
    path = tmp_path / "model.params"
    save_params(tiny_theta, str(path), {"seed": 3})
    loaded, manifest = load_params(str(path))
    assert manifest == {"seed": 3}
    assert loaded.layout == tiny_theta.layout
    assert np.array_equal(loaded.flatten(), tiny_theta.flatten())
    assert loaded.hidden_activation == tiny_theta.hidden_activation


def test_load_rejects_other_files(tmp_path):
    path = tmp_path / "junk.params"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ModelError):
        load_params(str(path))


def test_zero_weights_predict_one_half(tiny_theta, batch):
    zeroed = tiny_theta.zeros_like()
    assert forward(zeroed, batch[0]) == 0.5
    assert loss_dssm(zeroed, batch[:1]) == pytest.approx(np.log(2.0))
    assert not encode_session(zeroed, Session((batch[0].item, batch[1].item))).any()


def test_duplicated_batch_doubles_the_gradient(tiny_theta, batch):
    single = grad_dssm(tiny_theta, batch).flatten()
    double = grad_dssm(tiny_theta, batch + batch).flatten()
    assert np.allclose(double, 2 * single, rtol=1e-12, atol=1e-15)


def test_negative_example_pushes_output_bias_down(tiny_theta, batch):
    grad = grad_dssm(tiny_theta, [batch[1]])
    assert grad["mlp.bo"][0] > 0


def test_single_candidate_gives_zero_loss(tiny_theta, items, segment_view):
    view = ItemMaskedView(Session((items[0], items[2])), items[1], (items[1],))
    assert loss_item_masked(tiny_theta, view) == 0.0
    only = SegmentMaskedView(segment_view.session, segment_view.positive, (segment_view.positive,))
    assert loss_segment_masked(tiny_theta, only) == 0.0


def test_ssl_weight_zero_drops_a_term(tiny_theta, item_view, segment_view):
    weights = LossWeights(im=0.0, sm=0.7)
    assert loss_ssl(tiny_theta, [item_view, segment_view], weights) == pytest.approx(
        0.7 * loss_segment_masked(tiny_theta, segment_view))
