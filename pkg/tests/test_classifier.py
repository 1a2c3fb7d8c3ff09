import math

import numpy as np
import pytest

from sml.core.classifier import (
    FeedforwardNet,
    LabeledDataset,
    TrainConfig,
    empirical_risk,
    forward_logit,
    forward_logits,
    init_net,
    load_checkpoint,
    posterior_minus,
    posterior_plus,
    risk_gradient,
    save_checkpoint,
    train,
)
from sml.exceptions import DivergenceError, ShapeError

from conftest import identity_net, zero_net


def hand_net() -> FeedforwardNet:
    return FeedforwardNet(
        (np.array([[2.0]]), np.array([[1.0], [-1.0]])),
        (np.zeros(1), np.zeros(2)),
        activation="arctan",
    )


def random_net(rng, layer_sizes=(3, 4, 2), activation="arctan") -> FeedforwardNet:
    weights = tuple(rng.normal(size=(n_out, n_in)) for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))
    biases = tuple(rng.normal(size=n_out) for n_out in layer_sizes[1:])
    return FeedforwardNet(weights, biases, activation)


def test_forward_logit_hand_example():
    assert forward_logit(hand_net(), np.array([1.0])) == pytest.approx(2 * math.atan(2), abs=1e-12)
    assert forward_logit(hand_net(), np.array([1.0])) == pytest.approx(2.214297, abs=1e-6)


def test_posterior_examples():
    assert posterior_plus(zero_net(), np.zeros(2)) == 0.5
    assert posterior_plus(hand_net(), np.array([1.0])) == pytest.approx(0.901526, abs=1e-6)
    assert posterior_plus(hand_net(), np.array([1.0])) == pytest.approx(1 / (1 + math.exp(-2 * math.atan(2))), abs=1e-12)
    assert posterior_plus(identity_net(80.0), np.array([1.0])) == pytest.approx(1.0)


@pytest.mark.parametrize("logit", [-30.0, -7.5, -1.0, 0.0, 0.3, 12.0, 30.0])
def test_logit_is_log_odds(logit):
    net = identity_net(logit)
    h = np.array([1.0])
    log_odds = math.log(posterior_plus(net, h)) - math.log(posterior_minus(net, h))
    assert log_odds == pytest.approx(forward_logit(net, h), abs=1e-12)


def test_net_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        FeedforwardNet((np.zeros((3, 2)),), (np.zeros(3),))
    with pytest.raises(ShapeError):
        FeedforwardNet((np.zeros((2, 2)), np.zeros((2, 3))), (np.zeros(2), np.zeros(2)))
    with pytest.raises(ShapeError):
        forward_logits(zero_net(input_dim=2), np.zeros((4, 3)))


def test_unknown_activation():
    with pytest.raises(ValueError):
        FeedforwardNet((np.zeros((2, 1)),), (np.zeros(2),), activation="softsign")


def test_empirical_risk_zero_net():
    data = LabeledDataset(np.ones((5, 2)), [1, -1, 1, 1, -1])
    assert empirical_risk(zero_net(), data) == pytest.approx(math.log(2), abs=1e-15)


def test_empirical_risk_two_margins():
    data = LabeledDataset(np.array([[1.0], [1.0]]), [1, -1])
    assert empirical_risk(identity_net(), data) == pytest.approx(0.813262, abs=1e-6)


def test_bias_gradient_hand_example():
    net = FeedforwardNet((np.zeros((2, 1)),), (np.zeros(2),))
    weight_grads, bias_grads = risk_gradient(net, LabeledDataset(np.array([[1.0]]), [1]))
    np.testing.assert_allclose(bias_grads[0], [0.5, -0.5])
    np.testing.assert_allclose(weight_grads[0], [[-0.5], [0.5]])


def test_gradient_is_invariant_to_duplication(rng):
    net = random_net(rng)
    features = rng.normal(size=(6, 3))
    labels = rng.choice([-1, 1], size=6)
    single = risk_gradient(net, LabeledDataset(features, labels))
    double = risk_gradient(net, LabeledDataset(np.vstack([features, features]), np.concatenate([labels, labels])))
    for a, b in zip(single[0] + single[1], double[0] + double[1]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def _numeric_gradient(net: FeedforwardNet, data: LabeledDataset, step: float = 1e-5):
    params = [np.array(p) for p in net.weights + net.biases]
    grads = []
    for index, param in enumerate(params):
        grad = np.zeros_like(param)
        for position in np.ndindex(param.shape):
            values = []
            for sign in (1.0, -1.0):
                shifted = [p.copy() for p in params]
                shifted[index][position] += sign * step
                candidate = net.with_parameters(shifted[:net.depth], shifted[net.depth:])
                values.append(empirical_risk(candidate, data))
            grad[position] = (values[0] - values[1]) / (2 * step)
        grads.append(grad)
    return grads


@pytest.mark.parametrize("activation", ["arctan", "tanh"])
def test_gradient_matches_finite_differences(rng, activation):
    for _ in range(25):
        sizes = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), 2)
        net = random_net(rng, sizes, activation)
        assert net.num_parameters <= 100
        data = LabeledDataset(rng.normal(size=(8, sizes[0])), rng.choice([-1, 1], size=8))
        weight_grads, bias_grads = risk_gradient(net, data)
        analytic = np.concatenate([g.ravel() for g in weight_grads + bias_grads])
        numeric = np.concatenate([g.ravel() for g in _numeric_gradient(net, data)])
        error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert error < 1e-5


def test_init_net_shapes_and_range(rng):
    net = init_net((784, 64, 2), "arctan", rng)
    assert net.layer_sizes == (784, 64, 2)
    assert net.depth == 2
    assert np.abs(net.weights[0]).max() <= 1 / math.sqrt(784)
    assert np.abs(net.weights[1]).max() <= 1 / math.sqrt(64)
    assert all((b == 0).all() for b in net.biases)
    with pytest.raises(ShapeError):
        init_net((3, 4, 1), "arctan", rng)


def test_train_zero_rate_keeps_parameters(rng):
    net = random_net(rng)
    data = LabeledDataset(rng.normal(size=(20, 3)), rng.choice([-1, 1], size=20))
    result = train(net, data, TrainConfig(batch_size=5, epochs=4, learning_rate=0.0, seed=3))
    for before, after in zip(net.weights + net.biases, result.net.weights + result.net.biases):
        np.testing.assert_array_equal(before, after)
    np.testing.assert_array_equal(result.risk_trace, np.full(4, empirical_risk(net, data)))


def test_train_separable_problem_descends():
    net = FeedforwardNet((np.zeros((2, 1)),), (np.zeros(2),))
    data = LabeledDataset(np.array([[1.0], [-1.0]]), [1, -1])
    result = train(net, data, TrainConfig(batch_size=2, epochs=200, learning_rate=0.5, shuffle=False))
    assert (np.diff(result.risk_trace) < 0).all()
    assert result.risk_trace[-1] < 0.1


def test_train_duplicated_data_with_doubled_batch(rng):
    net = random_net(rng)
    features = rng.normal(size=(12, 3))
    labels = rng.choice([-1, 1], size=12)
    original = train(net, LabeledDataset(features, labels), TrainConfig(batch_size=3, epochs=3, learning_rate=0.2, shuffle=False))
    doubled = LabeledDataset(np.repeat(features, 2, axis=0), np.repeat(labels, 2))
    twice = train(net, doubled, TrainConfig(batch_size=6, epochs=3, learning_rate=0.2, shuffle=False))
    for a, b in zip(original.net.weights + original.net.biases, twice.net.weights + twice.net.biases):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_train_is_seed_deterministic(rng):
    net = random_net(rng)
    data = LabeledDataset(rng.normal(size=(30, 3)), rng.choice([-1, 1], size=30))
    cfg = TrainConfig(batch_size=4, epochs=3, learning_rate=0.1, seed=42)
    first, second = train(net, data, cfg), train(net, data, cfg)
    np.testing.assert_array_equal(first.risk_trace, second.risk_trace)
    for a, b in zip(first.net.weights, second.net.weights):
        np.testing.assert_array_equal(a, b)


def test_train_divergence_names_epoch_and_batch(rng):
    net = random_net(rng)
    data = LabeledDataset(rng.normal(size=(10, 3)), rng.choice([-1, 1], size=10))
    with pytest.raises(DivergenceError) as info:
        train(net, data, TrainConfig(batch_size=5, epochs=2, learning_rate=float("inf")))
    assert info.value.epoch == 0
    assert info.value.batch == 0


def test_train_rejects_oversized_batch(rng):
    data = LabeledDataset(rng.normal(size=(4, 3)), [1, -1, 1, -1])
    with pytest.raises(ValueError):
        train(random_net(rng), data, TrainConfig(batch_size=5))


def test_labeled_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1)), [1, 0])
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((2, 1)), [1, -1, 1])
    data = LabeledDataset(np.arange(6.0).reshape(3, 2), [1, -1, 1])
    assert data.class_count(1) == 2
    np.testing.assert_array_equal(data.of_class(-1).sample_ids, [1])


def test_checkpoint_round_trip(tmp_path, rng):
    nets = [random_net(rng), random_net(rng, (3, 5, 2), "tanh")]
    path = save_checkpoint(tmp_path / "nets.npz", nets, training_means=np.array([0.1, -0.2]))
    loaded, extra = load_checkpoint(path)
    assert len(loaded) == 2
    for original, restored in zip(nets, loaded):
        assert restored.activation == original.activation
        for a, b in zip(original.weights + original.biases, restored.weights + restored.biases):
            np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(extra["training_means"], [0.1, -0.2])


def test_risk_symmetric_under_label_and_output_swap(rng):
    for _ in range(10):
        net = random_net(rng)
        data = LabeledDataset(rng.normal(size=(12, 3)), rng.choice([-1, 1], size=12))
        weights = list(net.weights)
        biases = list(net.biases)
        weights[-1] = weights[-1][::-1]
        biases[-1] = biases[-1][::-1]
        swapped = net.with_parameters(weights, biases)
        flipped = LabeledDataset(data.features, -data.labels)
        assert empirical_risk(swapped, flipped) == pytest.approx(empirical_risk(net, data), rel=1e-12)


def test_risk_invariant_to_sample_order(rng):
    net = random_net(rng)
    features = rng.normal(size=(30, 3))
    labels = rng.choice([-1, 1], size=30)
    order = rng.permutation(30)
    shuffled = LabeledDataset(features[order], labels[order])
    assert empirical_risk(net, shuffled) == pytest.approx(empirical_risk(net, LabeledDataset(features, labels)), rel=1e-12)


def test_risk_finite_at_extreme_margins():
    data = LabeledDataset(np.array([[1e4], [-1e4]]), [1, 1])
    assert empirical_risk(identity_net(), data) == pytest.approx(5000.0, rel=1e-12)
    weight_grads, bias_grads = risk_gradient(identity_net(), data)
    assert all(np.isfinite(g).all() for g in weight_grads + bias_grads)
