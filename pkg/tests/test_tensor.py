import numpy as np
import pytest

from sampletag import tensor as T
from sampletag.errors import ConfigError, DimensionError, StateError


def make_conv(kernel, bias=0.0, stride=1, padding=1):
    weight = np.asarray(kernel, dtype=np.float64).reshape(1, 1, 3)
    return T.ConvParams(T.Parameter(weight), T.Parameter(np.array([bias])), stride, padding)


def column(values):
    return np.asarray(values, dtype=np.float64).reshape(1, -1, 1)


def test_conv1d_identity_kernel():
    out = T.conv1d(column([1, 2, 3]), make_conv([0, 1, 0]))
    assert out.ravel().tolist() == [1, 2, 3]


def test_conv1d_sliding_sum_with_zero_padding():
    out = T.conv1d(column([1, 2, 3]), make_conv([1, 1, 1]))
    assert out.ravel().tolist() == [3, 6, 5]


def test_conv1d_strided_output_time():
    assert T.conv_out_time(59049, stride=3, padding=0) == 19683
    out = T.conv1d(np.zeros((1, 81, 1)), make_conv([1, 1, 1], stride=3, padding=0))
    assert out.shape == (1, 27, 1)


def test_conv1d_rejects_channel_mismatch():
    with pytest.raises(DimensionError, match="input channels"):
        T.conv1d(np.zeros((1, 9, 2)), make_conv([1, 1, 1]))


def test_conv1d_rejects_other_kernel_widths():
    with pytest.raises(ConfigError):
        T.ConvParams(T.Parameter(np.zeros((1, 1, 5))), T.Parameter(np.zeros(1)))


def test_conv1d_backward_zero_grad(rng):
    p = T.init_conv(rng, 2, 3, dtype=np.float64)
    tape = T.GradTape()
    out = T.conv1d(rng.standard_normal((1, 9, 2)), p, tape)
    gx, gw, gb = T.conv1d_backward(np.zeros_like(out), tape)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv1d_backward_identity_kernel_passes_gradient(rng):
    tape = T.GradTape()
    T.conv1d(column([1, 2, 3, 4]), make_conv([0, 1, 0]), tape)
    g = column([0.5, -1, 2, 3])
    gx, _, _ = T.conv1d_backward(g, tape)
    np.testing.assert_array_equal(gx, g)


def test_maxpool1d_window_max():
    out = T.maxpool1d(column([1, 5, 2, 4, 4, 4, 0, -1, -2]), 3)
    assert out.ravel().tolist() == [5, 4, 0]


def test_maxpool1d_ties_route_to_first_element():
    tape = T.GradTape()
    out = T.maxpool1d(np.full((1, 6, 1), 2.0), 3, tape)
    assert out.ravel().tolist() == [2, 2]
    grad = T.maxpool1d_backward(np.ones_like(out), tape)
    assert grad.ravel().tolist() == [1, 0, 0, 1, 0, 0]


def test_maxpool1d_requires_divisible_time():
    with pytest.raises(DimensionError):
        T.maxpool1d(np.zeros((1, 7, 1)), 3)
    assert T.maxpool1d(np.zeros((1, 19683, 1)), 3).shape == (1, 6561, 1)


def test_global_avg_pool(rng):
    assert T.global_avg_pool(column([2, 4, 6])).ravel().tolist() == [4]
    x = column([7.5])
    np.testing.assert_array_equal(T.global_avg_pool(x), x)
    x = rng.standard_normal((1, 9, 4))
    expected = [sum(x[0, t, c] for t in range(9)) / 9 for c in range(4)]
    np.testing.assert_allclose(T.global_avg_pool(x).ravel(), expected, atol=1e-6)


def test_global_max_pool(rng):
    assert T.global_max_pool(column([-3, -1, -2])).ravel().tolist() == [-1]
    assert T.global_max_pool(column(np.arange(10))).ravel().tolist() == [9]
    x = rng.standard_normal((1, 27, 8))
    for c in range(8):
        best = x[0, 0, c]
        for t in range(27):
            best = max(best, x[0, t, c])
        assert T.global_max_pool(x)[0, 0, c] == best


def test_dense_identity_and_constant():
    x = np.array([[1.0, -2.0, 3.0]])
    eye = T.DenseParams(T.Parameter(np.eye(3)), T.Parameter(np.zeros(3)))
    np.testing.assert_array_equal(T.dense(x, eye), x)
    const = T.DenseParams(T.Parameter(np.zeros((2, 3))), T.Parameter(np.array([4.0, 4.0])))
    assert T.dense(x, const).tolist() == [[4.0, 4.0]]


def test_batchnorm_constant_input_gives_zeros():
    p = T.BatchNormParams.fresh(2, np.float64)
    out = T.batchnorm1d(np.full((2, 5, 2), 3.0), p)
    np.testing.assert_array_equal(out, 0.0)


def test_batchnorm_zero_gamma_outputs_beta(rng):
    p = T.BatchNormParams.fresh(2, np.float64)
    p.gamma.value[...] = 0.0
    p.beta.value[...] = [0.25, -1.0]
    out = T.batchnorm1d(rng.standard_normal((3, 4, 2)), p)
    np.testing.assert_array_equal(out[..., 0], 0.25)
    np.testing.assert_array_equal(out[..., 1], -1.0)


def test_batchnorm_running_stats_and_eval_mode(rng):
    p = T.BatchNormParams.fresh(1, np.float64)
    x = rng.standard_normal((4, 5, 1)) * 2 + 3
    T.batchnorm1d(x, p)
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean())
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(ddof=1))
    p.mode = 'eval'
    out = T.batchnorm1d(x, p)
    expected = (x - p.running_mean) / np.sqrt(p.running_var + T.BN_EPS)
    np.testing.assert_allclose(out, expected)


def test_batchnorm_single_element_in_train_mode():
    p = T.BatchNormParams.fresh(1)
    with pytest.raises(StateError):
        T.batchnorm1d(np.zeros((1, 1, 1), dtype=np.float32), p)


def test_relu_and_sigmoid():
    assert T.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert T.sigmoid(np.array([0.0]))[0] == 0.5
    out = T.sigmoid(np.array([-30.0, -1.0, 1.0, 30.0]))
    assert np.all((out > 0) & (out < 1))


def test_relu_subgradient_at_zero_is_zero():
    tape = T.GradTape()
    T.relu(np.array([0.0, 1.0]), tape)
    assert T.relu_backward(np.ones(2), tape).tolist() == [0.0, 1.0]


def test_dropout_identity_cases(rng):
    x = rng.standard_normal((2, 3, 4))
    assert T.dropout(x, 0.0, rng) is x
    assert T.dropout(x, 0.5, rng, training=False) is x


def test_dropout_keeps_expected_fraction():
    rng = np.random.default_rng(0)
    x = np.ones(100_000)
    out = T.dropout(x, 0.5, rng)
    kept = np.mean(out != 0)
    assert abs(kept - 0.5) < 0.01
    assert abs(out.mean() - 1.0) < 0.02


def test_dropout_rejects_rate_one(rng):
    with pytest.raises(ConfigError):
        T.dropout(np.ones(3), 1.0, rng)


def test_channel_scale_backward(rng):
    u = rng.standard_normal((2, 4, 3))
    s = rng.uniform(size=(2, 3))
    tape = T.GradTape()
    out = T.channel_scale(u, s, tape)
    np.testing.assert_allclose(out[1, 2], u[1, 2] * s[1])
    gu, gs = T.channel_scale_backward(np.ones_like(out), tape)
    np.testing.assert_allclose(gu, np.broadcast_to(s[:, None, :], u.shape))
    np.testing.assert_allclose(gs, u.sum(axis=1))


def test_tape_is_consumed_once(rng):
    tape = T.GradTape()
    T.relu(np.ones(3), tape)
    T.relu_backward(np.ones(3), tape)
    with pytest.raises(StateError, match="empty or consumed"):
        T.relu_backward(np.ones(3), tape)


def test_tape_detects_out_of_order_backward():
    tape = T.GradTape()
    T.relu(np.ones((1, 3, 1)), tape)
    T.sigmoid(np.ones((1, 3, 1)), tape)
    with pytest.raises(StateError, match="sigmoid record"):
        T.relu_backward(np.ones((1, 3, 1)), tape)


def test_biases_are_not_decayed(rng):
    conv = T.init_conv(rng, 2, 3)
    bn = T.BatchNormParams.fresh(3)
    assert conv.weight.decay and not conv.bias.decay
    assert not bn.gamma.decay and not bn.beta.decay
