import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixerca import kernels
from mixerca.errors import ShapeError
from mixerca.kernels import BnMoments

from oracles import conv2d_reference, depthwise_conv2d_reference


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv_k1_identity_preserves_planes(rng):
    x = rng.standard_normal((3, 4, 2))
    w = np.eye(2).reshape(1, 1, 2, 2)
    out = kernels.conv2d_forward(x, w, np.zeros(2))
    np.testing.assert_array_equal(out, x)
    np.testing.assert_array_equal(out[1, 2], x[1, 2])


def test_conv_k3_all_ones_sums_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    w = np.ones((3, 3, 1, 1))
    out = kernels.conv2d_forward(x, w, np.zeros(1))
    # every 3x3 window centered inside a zero-padded 2x2 grid covers all
    # four cells, so every output equals 1 + 2 + 3 + 4
    np.testing.assert_array_equal(out, np.full((2, 2, 1), 10.0))


def test_conv_zero_weights_yields_bias(rng):
    x = rng.standard_normal((4, 4, 3))
    out = kernels.conv2d_forward(x, np.zeros((3, 3, 3, 2)), np.array([5.0, 5.0]))
    np.testing.assert_array_equal(out, np.full((4, 4, 2), 5.0))


def test_conv_batch_axis_matches_loop(rng):
    x = rng.standard_normal((3, 5, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    batched = kernels.conv2d_forward(x, w, b)
    for n in range(3):
        np.testing.assert_array_equal(batched[n], kernels.conv2d_forward(x[n], w, b))


def test_conv_shape_errors(rng):
    x = rng.standard_normal((4, 4, 3))
    with pytest.raises(ShapeError):
        kernels.conv2d_forward(x, np.zeros((2, 2, 3, 2)), np.zeros(2))  # even kernel
    with pytest.raises(ShapeError):
        kernels.conv2d_forward(x, np.zeros((3, 5, 3, 2)), np.zeros(2))  # not square
    with pytest.raises(ShapeError):
        kernels.conv2d_forward(x, np.zeros((3, 3, 2, 2)), np.zeros(2))  # channel mismatch
    with pytest.raises(ShapeError):
        kernels.conv2d_forward(x, np.zeros((3, 3, 3, 2)), np.zeros(3))  # bias mismatch
    with pytest.raises(ShapeError):
        kernels.conv2d_forward(x[0], np.zeros((3, 3, 4, 2)), np.zeros(2))  # rank 2 input


def test_conv_matches_reference_oracle(rng):
    for k in (1, 3, 5, 7):
        x = rng.standard_normal((6, 5, 3))
        w = rng.standard_normal((k, k, 3, 2))
        b = rng.standard_normal(2)
        ours = kernels.conv2d_forward(x, w, b)
        ref = np.array(conv2d_reference(x.tolist(), w.tolist(), b.tolist()))
        np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# depthwise_conv2d
# ---------------------------------------------------------------------------


def test_depthwise_delta_kernel_is_identity(rng):
    x = rng.standard_normal((5, 4, 3))
    w = np.zeros((3, 3, 3))
    w[1, 1, :] = 1.0
    out = kernels.depthwise_conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_depthwise_all_ones_sums_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    out = kernels.depthwise_conv2d_forward(x, np.ones((3, 3, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, np.full((2, 2, 1), 10.0))


def test_depthwise_channels_independent(rng):
    x = rng.standard_normal((5, 5, 4))
    w = rng.standard_normal((3, 3, 4))
    b = rng.standard_normal(4)
    base = kernels.depthwise_conv2d_forward(x, w, b)
    bumped = x.copy()
    bumped[:, :, 0] += rng.standard_normal((5, 5))
    out = kernels.depthwise_conv2d_forward(bumped, w, b)
    assert not np.array_equal(out[:, :, 0], base[:, :, 0])
    np.testing.assert_array_equal(out[:, :, 1:], base[:, :, 1:])


def test_depthwise_matches_reference_oracle(rng):
    for k in (1, 3, 5, 7):
        x = rng.standard_normal((5, 6, 4))
        w = rng.standard_normal((k, k, 4))
        b = rng.standard_normal(4)
        ours = kernels.depthwise_conv2d_forward(x, w, b)
        ref = np.array(depthwise_conv2d_reference(x.tolist(), w.tolist(), b.tolist()))
        np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-12)


@given(st.integers(2, 6), st.integers(2, 6), st.sampled_from([1, 3, 5]), st.integers(0, 999))
def test_single_channel_depthwise_equals_conv(h, w, k, seed):
    # With one channel the two definitions coincide term by term, and the
    # implementations share their tap order, so outputs are bit-equal.
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((h, w, 1))
    kernel = gen.standard_normal((k, k, 1))
    bias = gen.standard_normal(1)
    dw = kernels.depthwise_conv2d_forward(x, kernel, bias)
    conv = kernels.conv2d_forward(x, kernel.reshape(k, k, 1, 1), bias)
    np.testing.assert_array_equal(dw, conv)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 999))
def test_conv_k1_equals_dense(h, w, cin, cout, seed):
    # A 1x1 convolution is a per-pixel affine map; both paths reduce to
    # the same (H*W, Cin) @ (Cin, Cout) product, so equality is exact.
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((h, w, cin))
    kernel = gen.standard_normal((1, 1, cin, cout))
    bias = gen.standard_normal(cout)
    conv = kernels.conv2d_forward(x, kernel, bias)
    dense = kernels.dense_forward(x.reshape(-1, cin), kernel[0, 0], bias)
    np.testing.assert_array_equal(conv.reshape(-1, cout), dense)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def test_gelu_values():
    out = kernels.gelu(np.array([0.0, 10.0, -10.0, 1.0]))
    assert out[0] == 0.0
    assert abs(out[1] - 10.0) <= 1e-9
    assert abs(out[2]) <= 1e-9
    assert out[3] == pytest.approx(0.8413447460685429, abs=1e-15)


def test_gelu_backward_at_zero():
    grad = kernels.gelu_backward(np.array([0.0]), np.array([1.0]))
    assert abs(float(grad[0]) - 0.5) <= 1e-12


def test_relu_hand_case():
    np.testing.assert_array_equal(
        kernels.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0]
    )
    np.testing.assert_array_equal(
        kernels.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0.0, 0.0, 1.0]
    )


def test_sigmoid_values():
    out = kernels.sigmoid(np.array([0.0, 800.0, -800.0]))
    assert out[0] == 0.5
    # stable on both tails
    assert out[1] == 1.0
    assert out[2] == pytest.approx(0.0, abs=1e-300)


@given(st.floats(min_value=-50.0, max_value=50.0, allow_nan=False))
def test_sigmoid_symmetry(x):
    total = kernels.sigmoid(np.array([x])) + kernels.sigmoid(np.array([-x]))
    assert abs(total[0] - 1.0) <= 1e-12


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def _fresh_moments(c):
    return BnMoments(np.zeros(c), np.ones(c))


def test_batchnorm_train_standardizes(rng):
    x = rng.standard_normal((4, 3, 3, 5)) * 2.0 + 1.0
    gamma = np.ones(5)
    beta = np.zeros(5)
    y, _, _ = kernels.batchnorm_forward(x, gamma, beta, _fresh_moments(5), "train")
    means = y.mean(axis=(0, 1, 2))
    assert np.all(np.abs(means) <= 1e-10)
    # the epsilon in the denominator shrinks the output variance to
    # v / (v + eps); compare against that corrected target
    v = x.var(axis=(0, 1, 2))
    expected = v / (v + 1e-3)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), expected, rtol=0, atol=1e-8)
    # with a negligible epsilon the variance is 1 outright
    y2, _, _ = kernels.batchnorm_forward(
        x, gamma, beta, _fresh_moments(5), "train", epsilon=1e-12
    )
    np.testing.assert_allclose(y2.var(axis=(0, 1, 2)), 1.0, rtol=0, atol=1e-8)


def test_batchnorm_gamma_zero_yields_beta(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    y, _, _ = kernels.batchnorm_forward(
        x, np.zeros(4), np.full(4, 7.0), _fresh_moments(4), "train"
    )
    np.testing.assert_array_equal(y, np.full((2, 3, 3, 4), 7.0))


def test_batchnorm_infer_identity_stats(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    y, _, returned = kernels.batchnorm_forward(
        x, np.ones(4), np.zeros(4), _fresh_moments(4), "infer"
    )
    np.testing.assert_allclose(y * math.sqrt(1.0 + 1e-3), x, rtol=1e-15)
    y2, _, _ = kernels.batchnorm_forward(
        x, np.ones(4), np.zeros(4), _fresh_moments(4), "infer", epsilon=1e-12
    )
    np.testing.assert_allclose(y2, x, rtol=0, atol=1e-8)
    # infer mode returns the moments unchanged
    np.testing.assert_array_equal(returned.mean, np.zeros(4))
    np.testing.assert_array_equal(returned.var, np.ones(4))


def test_batchnorm_running_update(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    moments = BnMoments(np.full(4, 0.5), np.full(4, 2.0))
    _, _, updated = kernels.batchnorm_forward(x, np.ones(4), np.zeros(4), moments, "train")
    batch_mean = x.mean(axis=(0, 1, 2))
    batch_var = x.var(axis=(0, 1, 2))
    np.testing.assert_allclose(updated.mean, 0.99 * 0.5 + 0.01 * batch_mean, rtol=1e-15)
    np.testing.assert_allclose(updated.var, 0.99 * 2.0 + 0.01 * batch_var, rtol=1e-15)
    # the forward never mutates what it was handed
    np.testing.assert_array_equal(moments.mean, np.full(4, 0.5))
    np.testing.assert_array_equal(moments.var, np.full(4, 2.0))


def test_batchnorm_errors(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    with pytest.raises(ShapeError):
        kernels.batchnorm_forward(x[0], np.ones(4), np.zeros(4), _fresh_moments(4), "train")
    with pytest.raises(ShapeError):
        kernels.batchnorm_forward(x, np.ones(3), np.zeros(4), _fresh_moments(4), "train")
    with pytest.raises(ShapeError):
        kernels.batchnorm_forward(x, np.ones(4), np.zeros(4), _fresh_moments(4), "test")
    with pytest.raises(ShapeError):
        kernels.batchnorm_forward(x, np.ones(4), np.zeros(4), _fresh_moments(4), "train",
                                  epsilon=0.0)
    single = rng.standard_normal((1, 1, 1, 4))
    with pytest.raises(ShapeError):
        kernels.batchnorm_forward(single, np.ones(4), np.zeros(4), _fresh_moments(4), "train")
    # one position is fine in infer mode
    kernels.batchnorm_forward(single, np.ones(4), np.zeros(4), _fresh_moments(4), "infer")


# ---------------------------------------------------------------------------
# pooling, dense, softmax
# ---------------------------------------------------------------------------


def test_global_avg_pool_hand_case():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert float(kernels.global_avg_pool(x)[0]) == 2.5


@given(st.integers(0, 999))
def test_global_avg_pool_integer_linearity_exact(seed):
    # integer entries over a power-of-two position count: sums and the
    # final division are exact, so pooling commutes with addition exactly
    gen = np.random.default_rng(seed)
    a = gen.integers(-100, 100, (4, 4, 3)).astype(np.float64)
    b = gen.integers(-100, 100, (4, 4, 3)).astype(np.float64)
    np.testing.assert_array_equal(
        kernels.global_avg_pool(a + b),
        kernels.global_avg_pool(a) + kernels.global_avg_pool(b),
    )


def test_dense_hand_cases(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(
        kernels.dense_forward(x, np.eye(4), np.zeros(4)), x
    )
    np.testing.assert_array_equal(
        kernels.dense_forward(np.zeros(4), rng.standard_normal((4, 2)), np.array([3.0, -1.0])),
        [3.0, -1.0],
    )
    out = kernels.dense_forward(np.array([1.0, 2.0]), np.eye(2), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(out, [2.0, 3.0])


def test_dense_backward_one_hot_projection(rng):
    x = rng.standard_normal(4)
    w = rng.standard_normal((4, 3))
    grad_out = np.array([0.0, 1.0, 0.0])
    dx, dw, db = kernels.dense_backward(x, w, grad_out)
    np.testing.assert_array_equal(dw[:, 1], x)
    np.testing.assert_array_equal(dw[:, 0], np.zeros(4))
    np.testing.assert_array_equal(dw[:, 2], np.zeros(4))
    np.testing.assert_array_equal(db, grad_out)
    np.testing.assert_array_equal(dx, w[:, 1])


def test_softmax_hand_cases():
    np.testing.assert_array_equal(kernels.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    probs = kernels.softmax(np.log(np.array([1.0, 2.0, 3.0])))
    np.testing.assert_allclose(probs, [1 / 6, 2 / 6, 3 / 6], rtol=0, atol=1e-12)


@given(
    st.lists(st.floats(min_value=-30.0, max_value=30.0, allow_nan=False),
             min_size=2, max_size=8),
    st.floats(min_value=-100.0, max_value=100.0, allow_nan=False),
)
def test_softmax_shift_invariance(logits, shift):
    z = np.array(logits)
    np.testing.assert_allclose(
        kernels.softmax(z + shift), kernels.softmax(z), rtol=0, atol=1e-12
    )


def test_softmax_rows_sum_to_one(rng):
    probs = kernels.softmax(rng.standard_normal((6, 9)) * 3.0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(probs > 0.0)
