import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depcae.tensor import (
    AdamState, LayerSpec, NonFiniteError, ShapeError, adam_step, batchnorm_backward, batchnorm_forward,
    conv2d_backward, conv2d_forward, conv_output_size, deconv2d_backward, deconv2d_forward,
    deconv_output_size, maxpool2x2_backward, maxpool2x2_forward, relu, relu_backward, sigmoid,
    sigmoid_backward,
)
from oracles import central_difference, direct_conv, max_relative_error, scatter_deconv


def conv_spec(cin=1, cout=1, stride=1, pad=1):
    return LayerSpec("conv", (1, 3, 3), (1, stride, stride), (0, pad, pad), cin, cout)


def deconv_spec(cin=1, cout=1, stride=1, pad=1, op=0):
    return LayerSpec("deconv", (1, 3, 3), (1, stride, stride), (0, pad, pad), cin, cout, (0, op, op))


IDENTITY = np.zeros((1, 1, 3, 3))
IDENTITY[0, 0, 1, 1] = 1.0


# --- layer spec --------------------------------------------------------------

def test_layer_spec_rejects_temporal_kernel():
    with pytest.raises(ValueError, match="temporal"):
        LayerSpec("conv", (3, 3, 3))


def test_layer_spec_rejects_padding_not_below_kernel():
    with pytest.raises(ValueError, match="padding"):
        LayerSpec("conv", (1, 3, 3), padding=(0, 3, 3))


def test_layer_spec_rejects_unknown_kind():
    with pytest.raises(ValueError):
        LayerSpec("dense")


# --- convolution ---------------------------------------------------------------

def test_conv_zero_input_gives_zero_output():
    w = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
    out = conv2d_forward(np.zeros((1, 3, 3, 1)), w, np.zeros(1), conv_spec())
    assert np.array_equal(out, np.zeros((1, 3, 3, 1)))


def test_conv_identity_kernel_reproduces_input():
    x = np.random.default_rng(1).random((1, 3, 3, 1))
    assert np.array_equal(conv2d_forward(x, IDENTITY, np.zeros(1), conv_spec()), x)


def test_conv_all_ones_kernel_center_value():
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 4, 4, 1)
    out = conv2d_forward(x, np.ones((1, 1, 3, 3)), None, conv_spec())
    oracle = direct_conv(x, np.ones((1, 1, 3, 3)), 1, 1)
    assert oracle[0, 1, 1, 0] == 54.0
    assert out[0, 1, 1, 0] == 54.0
    np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(size=st.integers(3, 9), stride=st.integers(1, 3), pad=st.integers(0, 2), cin=st.integers(1, 3),
       cout=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_conv_matches_direct_loop(size, stride, pad, cin, cout, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, size, size + 1, cin))
    w = rng.normal(size=(cout, cin, 3, 3))
    out = conv2d_forward(x, w, None, conv_spec(cin, cout, stride, pad))
    assert out.shape[1] == conv_output_size(size, 3, stride, pad)
    np.testing.assert_allclose(out, direct_conv(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_shape_error_names_axis():
    with pytest.raises(ShapeError, match="channel"):
        conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((1, 1, 3, 3)), None, conv_spec())
    with pytest.raises(ShapeError, match="height"):
        conv2d_forward(np.zeros((1, 1, 4, 1)), np.zeros((1, 1, 3, 3)), None, conv_spec(pad=0))


def test_conv_rejects_non_finite_input():
    x = np.zeros((1, 3, 3, 1))
    x[0, 1, 1, 0] = np.nan
    with pytest.raises(NonFiniteError):
        conv2d_forward(x, IDENTITY, None, conv_spec())


def test_conv_backward_zero_grad_gives_zero_gradients():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(1, 5, 5, 1)), rng.normal(size=(1, 1, 3, 3))
    gx, gw, gb = conv2d_backward(np.zeros((1, 5, 5, 1)), x, w, conv_spec())
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_identity_kernel_routes_single_pixel():
    g = np.zeros((1, 5, 5, 1))
    g[0, 2, 3, 0] = 1.0
    gx, _, _ = conv2d_backward(g, np.zeros((1, 5, 5, 1)), IDENTITY, conv_spec())
    assert np.array_equal(gx, g)


def _nonlinear_loss(out, r):
    return float(np.sum(out * r) + 0.5 * np.sum(out ** 3))


def _nonlinear_grad(out, r):
    return r + 1.5 * out ** 2


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_gradients_match_central_differences(stride, pad):
    rng = np.random.default_rng(3)
    spec = conv_spec(2, 3, stride, pad)
    x, w, b = rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    r = rng.normal(size=conv2d_forward(x, w, b, spec).shape)

    def loss():
        return _nonlinear_loss(conv2d_forward(x, w, b, spec), r)

    gx, gw, gb = conv2d_backward(_nonlinear_grad(conv2d_forward(x, w, b, spec), r), x, w, spec)
    assert max_relative_error(gw, central_difference(loss, w)) <= 1e-6
    assert max_relative_error(gx, central_difference(loss, x)) <= 1e-6
    assert max_relative_error(gb, central_difference(loss, b)) <= 1e-6


def test_conv_weight_gradient_single_channel_five_by_five():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(1, 5, 5, 1)), rng.normal(size=(1, 1, 3, 3))
    r = rng.normal(size=(1, 5, 5, 1))

    def loss():
        return _nonlinear_loss(conv2d_forward(x, w, None, conv_spec()), r)

    _, gw, _ = conv2d_backward(_nonlinear_grad(conv2d_forward(x, w, None, conv_spec()), r), x, w, conv_spec())
    assert max_relative_error(gw, central_difference(loss, w, h=1e-5)) <= 1e-6


def test_conv_gradient_in_float32_within_loose_tolerance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 5, 5, 1)).astype(np.float32)
    w = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
    r = rng.normal(size=(1, 5, 5, 1)).astype(np.float32)
    _, gw, _ = conv2d_backward(r, x, w, conv_spec())

    def loss():
        return float(np.sum(conv2d_forward(x, w, None, conv_spec()).astype(np.float64) * r))

    assert max_relative_error(gw, central_difference(loss, w, h=1e-2), floor=1e-3) <= 1e-3


# --- transposed convolution -------------------------------------------------------

def test_deconv_stride_two_doubles_sixteen_to_thirty_two():
    spec = deconv_spec(2, 1, stride=2, pad=1, op=1)
    assert deconv_output_size(16, 3, 2, 1, 1) == 32
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(1, 16, 16, 2)), rng.normal(size=(2, 1, 3, 3))
    out = deconv2d_forward(x, w, None, spec)
    assert out.shape == (1, 32, 32, 1)
    np.testing.assert_allclose(out, scatter_deconv(x, w, 2, 1, 1), rtol=1e-12, atol=1e-12)


def test_deconv_identity_kernel_reproduces_input():
    x = np.random.default_rng(7).random((1, 6, 6, 1))
    np.testing.assert_array_equal(deconv2d_forward(x, IDENTITY, None, deconv_spec()), x)


def test_deconv_zero_input_gives_zero_output():
    w = np.random.default_rng(8).normal(size=(1, 1, 3, 3))
    assert not deconv2d_forward(np.zeros((1, 4, 4, 1)), w, None, deconv_spec()).any()


@settings(max_examples=25, deadline=None)
@given(size=st.integers(1, 6), stride=st.integers(1, 3), pad=st.integers(0, 2), op=st.integers(0, 2),
       seed=st.integers(0, 2**16))
def test_deconv_matches_scatter_add(size, stride, pad, op, seed):
    if op >= max(stride, pad) and op > 0:
        return
    if deconv_output_size(size, 3, stride, pad, op) < 1:
        return
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, size, size, 2)), rng.normal(size=(2, 3, 3, 3))
    out = deconv2d_forward(x, w, None, deconv_spec(2, 3, stride, pad, op))
    np.testing.assert_allclose(out, scatter_deconv(x, w, stride, pad, op), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad,op", [(1, 1, 0), (2, 1, 1), (2, 0, 0)])
def test_deconv_gradients_match_central_differences(stride, pad, op):
    rng = np.random.default_rng(9)
    spec = deconv_spec(2, 2, stride, pad, op)
    x, w, b = rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    r = rng.normal(size=deconv2d_forward(x, w, b, spec).shape)

    def loss():
        return _nonlinear_loss(deconv2d_forward(x, w, b, spec), r)

    gx, gw, gb = deconv2d_backward(_nonlinear_grad(deconv2d_forward(x, w, b, spec), r), x, w, spec)
    assert max_relative_error(gw, central_difference(loss, w)) <= 1e-6
    assert max_relative_error(gx, central_difference(loss, x)) <= 1e-6
    assert max_relative_error(gb, central_difference(loss, b)) <= 1e-6


def test_conv_pool_deconv_round_trip_restores_spatial_shape():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 64, 64, 1))
    h = conv2d_forward(x, rng.normal(size=(4, 1, 3, 3)), None, conv_spec(1, 4))
    h, _ = maxpool2x2_forward(h)
    assert h.shape[1:3] == (32, 32)
    out = deconv2d_forward(h, rng.normal(size=(4, 1, 3, 3)), None, deconv_spec(4, 1, 2, 1, 1))
    assert out.shape == x.shape


# --- pooling ------------------------------------------------------------------------

def test_maxpool_two_by_two_picks_max():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out, _ = maxpool2x2_forward(x)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 4.0


def test_maxpool_odd_size_is_an_error():
    with pytest.raises(ShapeError, match="height"):
        maxpool2x2_forward(np.zeros((1, 5, 4, 1)))
    with pytest.raises(ShapeError, match="width"):
        maxpool2x2_forward(np.zeros((1, 4, 5, 1)))


def test_maxpool_backward_sends_gradient_to_first_maximum():
    x = np.array([[2.0, 2.0], [1.0, 0.0]]).reshape(1, 2, 2, 1)
    _, idx = maxpool2x2_forward(x)
    g = maxpool2x2_backward(np.ones((1, 1, 1, 1)), idx)
    assert g.reshape(2, 2).tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_gradient_matches_central_differences():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 6, 4, 3))
    r = rng.normal(size=(2, 3, 2, 3))
    _, idx = maxpool2x2_forward(x)

    def loss():
        return float(np.sum(maxpool2x2_forward(x)[0] * r))

    assert max_relative_error(maxpool2x2_backward(r, idx), central_difference(loss, x)) <= 1e-6


# --- batch normalisation -----------------------------------------------------------

def test_batchnorm_normalises_channel_values():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
    out, _ = batchnorm_forward(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), training=True, eps=1e-5)
    assert abs(out.mean()) <= 1e-6
    assert abs(out.var() - 1.0) <= 1e-3


def test_batchnorm_updates_running_statistics():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
    mean, var = np.zeros(1), np.ones(1)
    batchnorm_forward(x, np.ones(1), np.zeros(1), mean, var, training=True, momentum=0.1)
    assert mean[0] == pytest.approx(0.25)
    # unbiased batch variance of 1..4 is 5/3
    assert var[0] == pytest.approx(0.9 + 0.1 * 5 / 3)


def test_batchnorm_eval_uses_running_statistics():
    x = np.full((1, 2, 2, 1), 3.0)
    out, cache = batchnorm_forward(x, np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]),
                                   training=False, eps=0.0)
    assert cache is None
    np.testing.assert_allclose(out, 2.0 * (3.0 - 1.0) / 2.0 + 1.0)


def test_batchnorm_gradients_match_central_differences():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(2, 3, 3, 2))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    r = rng.normal(size=x.shape)

    def loss():
        out, _ = batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
        return _nonlinear_loss(out, r)

    out, cache = batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
    gx, gg, gb = batchnorm_backward(_nonlinear_grad(out, r), gamma, cache)
    assert max_relative_error(gx, central_difference(loss, x), floor=1e-6) <= 1e-6
    assert max_relative_error(gg, central_difference(loss, gamma)) <= 1e-6
    assert max_relative_error(gb, central_difference(loss, beta)) <= 1e-6


# --- activations ---------------------------------------------------------------

def test_relu_values():
    assert relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert relu_backward(np.array([5.0, 5.0]), np.array([-1.0, 2.0])).tolist() == [0.0, 5.0]


def test_sigmoid_values_and_extremes_stay_finite():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    x = np.array([-1000.0, -3.0, 3.0, 1000.0])
    y = sigmoid(x)
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y[1:3], 1 / (1 + np.exp(-x[1:3])))


def test_sigmoid_gradient_matches_central_differences():
    x = np.random.default_rng(13).normal(size=(3, 4))
    r = np.random.default_rng(14).normal(size=(3, 4))
    g = sigmoid_backward(r, sigmoid(x))
    assert max_relative_error(g, central_difference(lambda: float(np.sum(sigmoid(x) * r)), x)) <= 1e-6


# --- properties ------------------------------------------------------------------

def test_forward_is_deterministic_bit_for_bit():
    rng = np.random.default_rng(15)
    x, w = rng.normal(size=(3, 8, 8, 2)).astype(np.float32), rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
    a = conv2d_forward(x, w, None, conv_spec(2, 4))
    b = conv2d_forward(x.copy(), w.copy(), None, conv_spec(2, 4))
    assert a.tobytes() == b.tobytes()


@settings(max_examples=20, deadline=None)
@given(perm_seed=st.integers(0, 2**16))
def test_frames_are_processed_independently(perm_seed):
    rng = np.random.default_rng(16)
    x = rng.normal(size=(6, 8, 8, 1))
    w1, w2 = rng.normal(size=(3, 1, 3, 3)), rng.normal(size=(3, 1, 3, 3))
    perm = np.random.default_rng(perm_seed).permutation(6)

    def net(v):
        h = relu(conv2d_forward(v, w1, None, conv_spec(1, 3)))
        h, _ = maxpool2x2_forward(h)
        return deconv2d_forward(h, w2, None, deconv_spec(3, 1, 2, 1, 1))

    np.testing.assert_allclose(net(x[perm]), net(x)[perm], rtol=1e-12, atol=1e-12)


# --- Adam ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert np.array_equal(p["w"], np.array([1.0, -2.0]))


def test_adam_zero_gradient_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.array([1.0, 1.0])}, state, lr=0.1)
    m_before, v_before = state.m["w"].copy(), state.v["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(state.m["w"], 0.9 * m_before)
    np.testing.assert_allclose(state.v["w"], 0.999 * v_before)


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([3.0, -0.5, 1e-3])
    adam_step(p, {"w": g}, AdamState(), lr=0.01, eps=1e-8)
    np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_three_scalar_steps_match_reference():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, m, v = 0.0, 0.0, 0.0
    for t in range(1, 4):
        g = 1.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": np.array([0.0])}
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"w": np.array([1.0])}, state, lr=lr, betas=(b1, b2), eps=eps)
    assert state.step == 3
    assert p["w"][0] == pytest.approx(theta, rel=1e-12)


def test_adam_non_finite_gradient_names_parameter():
    with pytest.raises(NonFiniteError, match="enc1.conv.weight"):
        adam_step({"enc1.conv.weight": np.zeros(2)}, {"enc1.conv.weight": np.array([np.inf, 0.0])},
                  AdamState(), lr=0.1)
