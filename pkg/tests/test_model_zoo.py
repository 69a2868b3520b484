import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from scipy.special import logsumexp

from fedsim.data import ClientShard, SampleSet, synth_blobs
from fedsim.errors import EmptyBatch, InvalidBatch, InvalidDimension, NotEstimable, UnsupportedMetric
from fedsim.model_zoo import (MCLRModel, MLPModel, QuadraticModel, accuracy, estimate_smoothness, grad, loss,
                              make_quadratic, predict, stochastic_grad)
from fedsim.verifier import fd_gradient_check


def _naive_mclr_loss(model, params, samples):
    weights, bias = model.unflatten(params)
    total = 0.0

    for x, label in samples:
        scores = x @ weights + bias
        total += logsumexp(scores) - scores[label]

    return total / len(samples) + 0.5 * model.l2_coeff * np.sum(weights ** 2)


def test_mclr_loss_at_zero_is_log_num_classes():
    samples = SampleSet(np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, 0.3], [2.0, -2.0]]), np.array([0, 1, 0, 1]))
    model = MCLRModel(2, 2)

    assert loss(model, np.zeros(model.num_params), samples) == pytest.approx(math.log(2), abs=1e-15)


def test_mclr_loss_matches_per_sample_sum(blobs, rng):
    model = MCLRModel(3, 4, l2_coeff=0.01)
    samples = blobs[np.arange(10)]
    params = rng.standard_normal(model.num_params)

    assert loss(model, params, samples) == pytest.approx(_naive_mclr_loss(model, params, samples), rel=1e-12)


def test_quadratic_loss_and_grad():
    model = QuadraticModel(np.eye(2), np.zeros(2))
    x = np.array([3.0, 4.0])
    samples = SampleSet(np.zeros((1, 1)), np.zeros(1))

    assert loss(model, x, samples) == 12.5
    assert_array_equal(grad(model, x, samples), [3.0, 4.0])


def test_quadratic_must_be_positive_definite():
    with pytest.raises(ValueError):
        QuadraticModel(np.diag([1.0, -1.0]), np.zeros(2))


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_gradients_match_finite_differences(blobs, seed):
    rng = np.random.default_rng(seed)
    mclr = MCLRModel(3, 4, l2_coeff=0.01)
    mlp = MLPModel(4, 5, 3)

    assert fd_gradient_check(mclr, 0.5 * rng.standard_normal(mclr.num_params), blobs) <= 1e-5
    assert fd_gradient_check(make_quadratic(6, 0.5, 5.0, seed), rng.standard_normal(6), blobs) <= 1e-5
    assert fd_gradient_check(mlp, mlp.init_params(rng), blobs, h=1e-5) <= 1e-4


def test_mclr_gradient_vanishes_at_a_separable_minimiser():
    samples = SampleSet(np.array([[-1.0], [-2.0], [1.0], [2.0]]), np.array([0, 0, 1, 1]))
    model = MCLRModel(2, 1, l2_coeff=0.1)
    x = np.zeros(model.num_params)

    for _ in range(20000):
        x -= 1.0 * grad(model, x, samples)

    assert np.linalg.norm(grad(model, x, samples)) <= 1e-8


def test_loss_is_invariant_to_sample_order(blobs, rng):
    model = MCLRModel(3, 4)
    params = rng.standard_normal(model.num_params)
    shuffled = blobs[rng.permutation(len(blobs))]

    assert loss(model, params, shuffled) == pytest.approx(loss(model, params, blobs), rel=1e-13)


def test_mclr_loss_is_convex_along_segments(blobs, rng):
    model = MCLRModel(3, 4, l2_coeff=0.01)

    for _ in range(50):
        a, b = rng.standard_normal((2, model.num_params))

        assert loss(model, 0.5 * (a + b), blobs) <= 0.5 * (loss(model, a, blobs) + loss(model, b, blobs)) + 1e-12


def test_errors_on_bad_inputs(blobs):
    model = MCLRModel(3, 4)

    with pytest.raises(InvalidDimension):
        loss(model, np.zeros(model.num_params + 1), blobs)

    with pytest.raises(EmptyBatch):
        grad(model, np.zeros(model.num_params), SampleSet.empty(4))


def test_full_batch_stochastic_grad_is_grad_and_keeps_the_stream(blobs, rng):
    model = MCLRModel(3, 4)
    shard = ClientShard(0, blobs, 1.0)
    params = rng.standard_normal(model.num_params)
    stream = np.random.default_rng(7)
    state = stream.bit_generator.state

    assert_array_equal(stochastic_grad(model, params, shard, len(blobs), stream), grad(model, params, blobs))
    assert stream.bit_generator.state == state


def test_stochastic_grad_is_deterministic(blobs):
    model = MCLRModel(3, 4)
    shard = ClientShard(0, blobs, 1.0)
    params = np.full(model.num_params, 0.1)

    first = stochastic_grad(model, params, shard, 5, np.random.default_rng(3))
    second = stochastic_grad(model, params, shard, 5, np.random.default_rng(3))

    assert_array_equal(first, second)


def test_stochastic_grad_rejects_oversized_batches(blobs):
    model = MCLRModel(3, 4)
    shard = ClientShard(0, blobs, 1.0)

    with pytest.raises(InvalidBatch):
        stochastic_grad(model, np.zeros(model.num_params), shard, len(blobs) + 1, np.random.default_rng(0))


def test_stochastic_grad_is_unbiased():
    samples = synth_blobs(seed=5, num_classes=2, num_features=1, n_total=20, spread=1.0)
    model = MCLRModel(2, 1)
    shard = ClientShard(0, samples, 1.0)
    params = np.array([0.3, -0.2, 0.1, 0.05])
    stream = np.random.default_rng(11)
    draws = np.array([stochastic_grad(model, params, shard, 5, stream) for _ in range(10000)])

    bound = 4 * draws.std(axis=0) / math.sqrt(len(draws)) + 1e-12

    assert np.all(np.abs(draws.mean(axis=0) - grad(model, params, samples)) <= bound)


def test_accuracy_and_tie_breaking():
    samples = SampleSet(np.array([[-1.0], [-2.0], [1.0], [2.0]]), np.array([0, 0, 1, 1]))
    model = MCLRModel(2, 1)

    assert_array_equal(predict(model, np.zeros(model.num_params), samples.features), [0, 0, 0, 0])
    assert accuracy(model, np.zeros(model.num_params), samples) == 0.5
    # Weight column for class 1 grows with the feature, so the sign of x decides.
    assert accuracy(model, np.array([0.0, 1.0, 0.0, 0.0]), samples) == 1.0


def test_accuracy_matches_a_per_sample_loop(rng):
    samples = synth_blobs(seed=2, num_classes=4, num_features=3, n_total=100, spread=1.0)
    model = MCLRModel(4, 3)
    params = rng.standard_normal(model.num_params)
    weights, bias = model.unflatten(params)
    correct = sum(int(np.argmax(x @ weights + bias) == label) for x, label in samples)

    assert accuracy(model, params, samples) == correct / 100


def test_accuracy_is_undefined_for_quadratics():
    with pytest.raises(UnsupportedMetric):
        accuracy(make_quadratic(3, 1.0, 2.0, 0), np.zeros(3), SampleSet(np.zeros((1, 1)), np.zeros(1)))


def test_estimate_smoothness():
    info = estimate_smoothness(QuadraticModel(np.diag([1.0, 4.0]), np.zeros(2)))

    assert info.L == pytest.approx(4.0, rel=1e-8)
    assert info.mu == pytest.approx(1.0, rel=1e-6)


def test_estimate_smoothness_mclr(rng):
    X = rng.standard_normal((50, 5))
    unit_rows = X / np.linalg.norm(X, axis=1, keepdims=True)
    samples = SampleSet(unit_rows, np.zeros(50))
    info = estimate_smoothness(MCLRModel(2, 5, l2_coeff=0.01), samples)
    expected = 0.25 * np.linalg.eigvalsh(unit_rows.T @ unit_rows / 50)[-1] + 0.01

    assert info.mu == 0.01
    assert info.L == pytest.approx(expected, rel=1e-6)


def test_mlp_smoothness_is_not_estimable(blobs):
    with pytest.raises(NotEstimable):
        estimate_smoothness(MLPModel(4, 5, 3), blobs)


def test_quadratic_minimiser_zeroes_the_gradient():
    model = make_quadratic(8, 0.5, 20.0, seed=3)
    samples = SampleSet(np.zeros((1, 1)), np.zeros(1))

    assert np.linalg.norm(grad(model, model.minimizer(), samples)) <= 1e-10
