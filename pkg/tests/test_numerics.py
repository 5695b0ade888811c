"""Layer primitives against hand-computed values, loop oracles and finite differences."""

from __future__ import annotations

import math

import numpy as np
import numpy.testing as npt
import pytest

from intentcnn import numerics as nm
from intentcnn.errors import (
    DegenerateInputError,
    DimensionError,
    InputError,
    NumericError,
)

import oracles


# ---------------------------------------------------------------------------
# convolution forward
# ---------------------------------------------------------------------------

def test_conv_identity_kernel_single_channel():
    x = np.array([[3.0, 1.0, 4.0, 1.0, 5.0]], dtype=np.float32)
    w = np.array([[[1.0]]], dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    npt.assert_array_equal(nm.conv1d_forward(x, w, b), x)


def test_conv_matches_textbook_flipped_convolution():
    # classic flipped convolution of [1,2,3] with [1,2] keeps valid outputs [4,7];
    # the library computes the un-flipped sliding dot product, so the caller
    # reverses the kernel taps to get the same numbers.
    x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    kernel = np.array([1.0, 2.0], dtype=np.float32)
    expected = oracles.flipped_conv1d_loops(x, kernel)
    npt.assert_array_equal(expected, np.array([4.0, 7.0], dtype=np.float32))
    got = nm.conv1d_forward(x[None, :], kernel[::-1].copy()[None, None, :], np.zeros(1, np.float32))
    npt.assert_array_equal(got[0], expected)


def test_conv_two_channels_sum():
    x = np.array([[1.0, 1.0], [2.0, 2.0]], dtype=np.float32)
    w = np.ones((1, 2, 1), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    npt.assert_array_equal(nm.conv1d_forward(x, w, b), np.array([[3.0, 3.0]], dtype=np.float32))


def test_conv_bias_is_added_per_output_channel():
    x = np.zeros((1, 4), dtype=np.float32)
    w = np.zeros((2, 1, 2), dtype=np.float32)
    b = np.array([1.5, -2.0], dtype=np.float32)
    out = nm.conv1d_forward(x, w, b)
    npt.assert_array_equal(out, np.array([[1.5] * 3, [-2.0] * 3], dtype=np.float32))


def test_conv_matches_loop_oracle_bit_exact_on_dyadic_grid():
    rng = np.random.default_rng(11)
    for channels in (1, 2, 4):
        for frames in (1, 2, 5, 9, 17):
            for kernel_width in (1, 2, 5):
                if kernel_width > frames:
                    continue
                x = oracles.dyadic(rng, (channels, frames))
                w = oracles.dyadic(rng, (3, channels, kernel_width))
                b = oracles.dyadic(rng, (3,))
                got = nm.conv1d_forward(x, w, b)
                want = oracles.conv1d_loops(x, w, b)
                assert got.dtype == np.float32
                npt.assert_array_equal(got, want)


def test_conv_batched_matches_per_sample():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3, 10)).astype(np.float32)
    w = rng.normal(size=(2, 3, 3)).astype(np.float32)
    b = rng.normal(size=2).astype(np.float32)
    batched = nm.conv1d_forward(x, w, b)
    assert batched.shape == (4, 2, 8)
    for i in range(4):
        npt.assert_array_equal(batched[i], nm.conv1d_forward(x[i], w, b))


def test_conv_errors():
    w = np.zeros((1, 2, 3), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    with pytest.raises(DimensionError):
        nm.conv1d_forward(np.zeros((3, 10), np.float32), w, b)   # channel mismatch
    with pytest.raises(DegenerateInputError):
        nm.conv1d_forward(np.zeros((2, 2), np.float32), w, b)    # frames < kernel width


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.5, 1.5, size=(3, 8)).astype(np.float64) * rng.choice([-1, 1], size=(3, 8))
    w = rng.uniform(0.3, 1.0, size=(2, 3, 3)) * rng.choice([-1, 1], size=(2, 3, 3))
    b = rng.uniform(-0.5, 0.5, size=2)
    up = rng.uniform(0.5, 1.5, size=(2, 6)) * rng.choice([-1, 1], size=(2, 6))
    dx, dw, db = nm.conv1d_backward(x, w, up)

    def loss():
        return float(np.sum(nm.conv1d_forward(x, w, b) * up))

    res = nm.gradient_check(loss, [x, w, b], [dx, dw, db], epsilon=1e-5)
    assert res.max_relative_error < 1e-6
    assert res.checked >= 0.9 * (x.size + w.size + b.size)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def test_maxpool_constant_and_examples():
    npt.assert_array_equal(
        nm.maxpool1d_forward(np.array([[5.0, 5.0, 5.0, 5.0]], np.float32), 2, 2),
        np.array([[5.0, 5.0]], np.float32))
    npt.assert_array_equal(
        nm.maxpool1d_forward(np.array([[1.0, 3.0, 2.0, 8.0]], np.float32), 2, 2),
        np.array([[3.0, 8.0]], np.float32))
    # trailing frame that does not fill a window is dropped
    npt.assert_array_equal(
        nm.maxpool1d_forward(np.array([[1.0, 2.0, 3.0, 4.0, 5.0]], np.float32), 2, 2),
        np.array([[2.0, 4.0]], np.float32))


def test_maxpool_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for channels in (1, 4):
        for frames in (2, 3, 8, 19, 32):
            for pool in (2, 3):
                for stride in (1, 2, 3):
                    if frames < pool:
                        continue
                    x = rng.normal(size=(channels, frames)).astype(np.float32)
                    npt.assert_array_equal(
                        nm.maxpool1d_forward(x, pool, stride),
                        oracles.maxpool1d_loops(x, pool, stride))


def test_maxpool_backward_routes_to_first_max():
    x = np.array([[2.0, 2.0, 1.0, 5.0]], dtype=np.float32)
    up = np.array([[10.0, 20.0]], dtype=np.float32)
    dx = nm.maxpool1d_backward(x, 2, 2, up)
    npt.assert_array_equal(dx, np.array([[10.0, 0.0, 0.0, 20.0]], np.float32))


def test_maxpool_backward_overlapping_windows_accumulate():
    x = np.array([[1.0, 9.0, 2.0, 3.0]], dtype=np.float32)
    up = np.array([[1.0, 1.0, 1.0]], dtype=np.float32)   # pool 2, stride 1 -> 3 windows
    dx = nm.maxpool1d_backward(x, 2, 1, up)
    npt.assert_array_equal(dx, np.array([[0.0, 2.0, 0.0, 1.0]], np.float32))


def test_maxpool_backward_finite_differences():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(2, 11)).astype(np.float64)
    up = rng.normal(size=(2, 5))

    def loss():
        return float(np.sum(nm.maxpool1d_forward(x, 3, 2) * up))

    dx = nm.maxpool1d_backward(x, 3, 2, up)
    res = nm.gradient_check(loss, [x], [dx], epsilon=1e-5)
    assert res.max_relative_error < 1e-6


def test_maxpool_errors():
    with pytest.raises(DegenerateInputError):
        nm.maxpool1d_forward(np.zeros((1, 1), np.float32), 2, 2)
    with pytest.raises(InputError):
        nm.maxpool1d_forward(np.zeros((1, 4), np.float32), 0, 2)


# ---------------------------------------------------------------------------
# dense / relu
# ---------------------------------------------------------------------------

def test_dense_worked_example_and_identity():
    w = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    out = nm.dense_forward(np.array([1.0, 1.0], np.float32), w, np.zeros(2, np.float32))
    npt.assert_array_equal(out, np.array([3.0, 7.0], np.float32))
    eye = np.eye(3, dtype=np.float32)
    x = np.array([4.0, -1.0, 2.5], np.float32)
    npt.assert_array_equal(nm.dense_forward(x, eye, np.zeros(3, np.float32)), x)


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(9)
    x = oracles.dyadic(rng, (6,))
    w = oracles.dyadic(rng, (4, 6))
    b = oracles.dyadic(rng, (4,))
    npt.assert_array_equal(nm.dense_forward(x, w, b), oracles.dense_loops(x, w, b))


def test_dense_backward_finite_differences():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    up = rng.uniform(0.5, 1.5, size=(5, 3)) * rng.choice([-1.0, 1.0], size=(5, 3))
    dx, dw, db = nm.dense_backward(x, w, up)

    def loss():
        return float(np.sum(nm.dense_forward(x, w, b) * up))

    res = nm.gradient_check(loss, [x, w, b], [dx, dw, db], epsilon=1e-5)
    assert res.max_relative_error < 1e-6
    assert res.checked >= x.size + w.size + b.size - 2


def test_relu_forward_and_backward():
    x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
    npt.assert_array_equal(nm.relu_forward(x), np.array([0.0, 0.0, 2.0], np.float32))
    up = np.array([5.0, 7.0, 9.0], dtype=np.float32)
    npt.assert_array_equal(nm.relu_backward(x, up), np.array([0.0, 0.0, 9.0], np.float32))


def test_relu_finite_differences_away_from_kink():
    rng = np.random.default_rng(17)
    x = rng.uniform(0.1, 2.0, size=12) * rng.choice([-1.0, 1.0], size=12)
    up = rng.uniform(0.5, 1.5, size=12) * rng.choice([-1.0, 1.0], size=12)

    def loss():
        return float(np.sum(nm.relu_forward(x) * up))

    res = nm.gradient_check(loss, [x], [nm.relu_backward(x, up)], epsilon=1e-5)
    assert res.max_relative_error < 1e-6
    assert res.skipped == 0


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def test_batchnorm_train_normalizes_each_feature():
    x = np.array([[1.0], [3.0]], dtype=np.float32)
    out, _ = nm.batchnorm_forward_train(x, np.ones(1, np.float32), np.zeros(1, np.float32))
    npt.assert_allclose(out, np.array([[-1.0], [1.0]], np.float32), atol=1e-4)

    rng = np.random.default_rng(19)
    x = rng.normal(2.0, 3.0, size=(16, 5)).astype(np.float32)
    out, _ = nm.batchnorm_forward_train(x, np.ones(5, np.float32), np.zeros(5, np.float32))
    npt.assert_allclose(out.mean(axis=0), np.zeros(5), atol=1e-6)
    npt.assert_allclose(out.std(axis=0), np.ones(5), atol=1e-3)


def test_batchnorm_infer_identity_with_unit_stats():
    x = np.array([[0.5, -1.0], [2.0, 3.0]], dtype=np.float32)
    out = nm.batchnorm_forward_infer(x, np.ones(2, np.float32), np.zeros(2, np.float32),
                                     np.zeros(2, np.float32), np.ones(2, np.float32))
    npt.assert_allclose(out, x, rtol=1e-4)


def test_batchnorm_running_update():
    x = np.array([[0.0], [2.0]], dtype=np.float32)    # batch mean 1, population var 1
    _, cache = nm.batchnorm_forward_train(x, np.ones(1, np.float32), np.zeros(1, np.float32))
    mean, var = nm.batchnorm_update_running(cache, np.zeros(1, np.float32), np.ones(1, np.float32))
    npt.assert_allclose(mean, [0.1], atol=1e-7)
    npt.assert_allclose(var, [1.0], atol=1e-7)


def test_batchnorm_requires_two_rows():
    with pytest.raises(DegenerateInputError):
        nm.batchnorm_forward_train(np.zeros((1, 3), np.float32),
                                   np.ones(3, np.float32), np.zeros(3, np.float32))


def test_batchnorm_backward_finite_differences():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(6, 4))
    gamma = rng.uniform(0.5, 1.5, size=4)
    beta = rng.normal(size=4)
    up = rng.normal(size=(6, 4))

    def loss():
        out, _ = nm.batchnorm_forward_train(x, gamma, beta)
        return float(np.sum(out * up))

    _, cache = nm.batchnorm_forward_train(x, gamma, beta)
    dx, dgamma, dbeta = nm.batchnorm_backward(cache, up)
    res = nm.gradient_check(loss, [x, gamma, beta], [dx, dgamma, dbeta], epsilon=1e-5)
    assert res.max_relative_error < 1e-6
    assert res.checked >= 0.9 * (x.size + gamma.size + beta.size)


# ---------------------------------------------------------------------------
# softmax and losses
# ---------------------------------------------------------------------------

def test_softmax_examples():
    npt.assert_allclose(nm.softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-12)
    npt.assert_allclose(nm.softmax(np.array([math.log(2.0), 0.0])),
                        np.array([2 / 3, 1 / 3]), atol=1e-12)


def test_softmax_shift_invariance_and_sum():
    rng = np.random.default_rng(29)
    logits = rng.normal(size=(20, 6))
    base = nm.softmax(logits)
    npt.assert_allclose(base.sum(axis=1), np.ones(20), atol=1e-6)
    for c in (-50.0, -1.0, 3.5, 200.0):
        npt.assert_allclose(nm.softmax(logits + c), base, atol=1e-6)


def test_softmax_rejects_non_finite_and_single_class():
    with pytest.raises(NumericError):
        nm.softmax(np.array([1.0, np.nan]))
    with pytest.raises(DimensionError):
        nm.softmax(np.array([1.0]))


def test_cce_perfect_prediction_is_zero():
    targets = nm.one_hot(np.array([0, 1]), 2, dtype=np.float64)
    assert nm.categorical_cross_entropy(targets, targets).value == 0.0


@pytest.mark.parametrize("k", range(2, 11))
def test_cce_uniform_equals_log_k(k):
    probs = np.full((3, k), 1.0 / k, dtype=np.float64)
    targets = nm.one_hot(np.array([0, 1, k - 1]), k, dtype=np.float64)
    loss = nm.categorical_cross_entropy(probs, targets)
    assert abs(loss.value - math.log(k)) < 1e-9
    assert loss.batch_size == 3


def test_cce_rejects_bad_targets_and_probs():
    probs = np.full((2, 3), 1 / 3)
    with pytest.raises(InputError):
        nm.categorical_cross_entropy(probs, np.array([[0.5, 0.5, 0.0], [1, 0, 0]]))
    with pytest.raises(InputError):
        nm.categorical_cross_entropy(np.array([[0.9, 0.9, 0.9], [1, 0, 0]]),
                                     nm.one_hot(np.array([0, 0]), 3))


def test_cce_clamp_keeps_zero_probability_finite():
    probs = np.array([[0.0, 1.0]], dtype=np.float64)
    targets = np.array([[1.0, 0.0]], dtype=np.float64)
    loss = nm.categorical_cross_entropy(probs, targets)
    assert math.isfinite(loss.value)
    assert abs(loss.value - (-math.log(nm.PROB_FLOOR))) < 1e-6


def test_softmax_cce_gradient_matches_finite_differences():
    rng = np.random.default_rng(31)
    logits = rng.normal(size=(4, 5))
    targets = nm.one_hot(np.array([0, 2, 4, 2]), 5, dtype=np.float64)

    def loss():
        return nm.categorical_cross_entropy(nm.softmax(logits), targets).value

    grad = nm.softmax_cce_logit_grad(nm.softmax(logits), targets)
    res = nm.gradient_check(loss, [logits], [grad], epsilon=1e-5)
    assert res.max_relative_error < 1e-5
    assert res.checked == logits.size


def test_bce_values():
    assert abs(nm.binary_cross_entropy(np.array([0.5]), np.array([1.0])).value
               - math.log(2.0)) < 1e-9
    loss = nm.binary_cross_entropy(np.array([0.9, 0.1]), np.array([1.0, 0.0]))
    assert abs(loss.value - 0.105360516) < 1e-8
    assert nm.binary_cross_entropy(np.array([1.0, 0.0]), np.array([1.0, 0.0])).value < 1e-10


def test_one_hot_shapes_and_bounds():
    out = nm.one_hot(np.array([2, 0]), 4)
    npt.assert_array_equal(out, np.array([[0, 0, 1, 0], [1, 0, 0, 0]], np.float32))
    with pytest.raises(InputError):
        nm.one_hot(np.array([4]), 4)


# ---------------------------------------------------------------------------
# gradient checker behaviour
# ---------------------------------------------------------------------------

def test_gradient_check_flags_kink_at_relu_zero():
    x = np.array([0.0, 1.0], dtype=np.float64)
    up = np.array([1.0, 1.0])

    def loss():
        return float(np.sum(nm.relu_forward(x) * up))

    res = nm.gradient_check(loss, [x], [nm.relu_backward(x, up)], epsilon=1e-5)
    assert res.skipped_kink == 1
    assert res.checked == 1
    assert res.max_relative_error < 1e-6


def test_gradient_check_catches_wrong_gradient():
    x = np.array([1.0, -2.0, 0.7])

    def loss():
        return float(np.sum(x ** 2))

    wrong = 3.0 * x   # truth is 2x
    res = nm.gradient_check(loss, [x], [wrong], epsilon=1e-5)
    assert res.max_relative_error > 0.3


def test_gradient_check_epsilon_bounds():
    with pytest.raises(InputError):
        nm.gradient_check(lambda: 0.0, [np.zeros(1)], [np.zeros(1)], epsilon=1.0)
