import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cryoimb.errors import NonFiniteError, ShapeError, StateError
from cryoimb.tensor import (
    SGD,
    Activation,
    Conv3D,
    Dense,
    Flatten,
    LayerParams,
    MaxPool3D,
    Network,
    activate,
    backward,
    conv3d,
    dense,
    finite_diff_grad,
    init_conv,
    init_dense,
    maxpool3d,
    relative_error,
    sgd_update,
    softmax,
)


def naive_conv3d(x, w, b, stride=1):
    """Six nested loops (plus the channel pair) straight from the definition."""
    C_in, D = x.shape[0], x.shape[1]
    C_out, k = w.shape[0], w.shape[2]
    d = (D - k) // stride + 1
    out = np.zeros((C_out, d, d, d))
    for o in range(C_out):
        for i in range(d):
            for j in range(d):
                for l in range(d):
                    acc = b[o]
                    for c in range(C_in):
                        for a in range(k):
                            for bb in range(k):
                                for e in range(k):
                                    acc += w[o, c, a, bb, e] * x[c, i * stride + a,
                                                                 j * stride + bb, l * stride + e]
                    out[o, i, j, l] = acc
    return out


def block_max(x, w):
    C, D = x.shape[0], x.shape[1]
    d = D // w
    out = np.empty((C, d, d, d))
    for c in range(C):
        for i in range(d):
            for j in range(d):
                for l in range(d):
                    out[c, i, j, l] = x[c, i * w:(i + 1) * w, j * w:(j + 1) * w, l * w:(l + 1) * w].max()
    return out


def conv_params(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return LayerParams(w, b, "conv3d")


# --- conv3d -------------------------------------------------------------------


def test_identity_kernel(rng, backend):
    x = rng.standard_normal((3, 5, 5, 5))
    w = np.zeros((3, 3, 1, 1, 1))
    for c in range(3):
        w[c, c] = 1.0
    np.testing.assert_array_equal(conv3d(x, conv_params(w)), x)


def test_window_sum_of_ones(backend):
    # even kernels are rejected by LayerParams, so sum a 2^3 window by hand
    x = np.ones((1, 4, 4, 4))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, :2, :2, :2] = 1.0
    out = conv3d(x, conv_params(w))
    assert np.all(out == 8.0)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_naive_loops(rng, backend, stride):
    x = rng.standard_normal((2, 8, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    got = conv3d(x, conv_params(w, b), stride)
    want = naive_conv3d(x, w, b, stride)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


def test_conv_output_extent_floors():
    layer = Conv3D(conv_params(np.zeros((1, 1, 3, 3, 3))), stride=2)
    assert layer.output_shape((1, 8, 8, 8)) == (1, 3, 3, 3)


def test_conv_channel_mismatch_names_both_counts():
    with pytest.raises(ShapeError, match="2 input channels, got 3"):
        conv3d(np.zeros((3, 5, 5, 5)), conv_params(np.zeros((1, 2, 3, 3, 3))))


def test_conv_kernel_larger_than_volume():
    with pytest.raises(ShapeError):
        conv3d(np.zeros((1, 2, 2, 2)), conv_params(np.zeros((1, 1, 3, 3, 3))))


def test_layer_params_validation():
    with pytest.raises(ShapeError):
        LayerParams(np.zeros((1, 1, 2, 2, 2)), np.zeros(1), "conv3d")
    with pytest.raises(ShapeError):
        LayerParams(np.zeros((2, 3)), np.zeros(3), "dense")
    with pytest.raises(ValueError):
        LayerParams(np.zeros((2, 3)), np.zeros(2), "lstm")


# --- maxpool ------------------------------------------------------------------


def test_pool_constant_volume(backend):
    out = maxpool3d(np.full((2, 4, 4, 4), 3.5), 2)
    assert out.shape == (2, 2, 2, 2) and np.all(out == 3.5)


def test_pool_single_spike(backend):
    x = np.zeros((1, 4, 4, 4))
    x[0, 1, 2, 3] = 9.0
    out = maxpool3d(x, 2)
    assert np.count_nonzero(out == 9.0) == 1 and out.sum() == 9.0


def test_pool_matches_block_max(rng, backend):
    x = rng.standard_normal((3, 8, 8, 8))
    np.testing.assert_array_equal(maxpool3d(x, 2), block_max(x, 2))


def test_pool_rejects_non_divisible():
    with pytest.raises(ShapeError):
        maxpool3d(np.zeros((1, 5, 5, 5)), 2)


def test_pool_backward_routes_to_argmax(rng, backend):
    x = rng.standard_normal((1, 1, 4, 4, 4))
    layer = MaxPool3D(2)
    out = layer.forward(x)
    g = layer.backward(np.ones_like(out))
    assert g.sum() == out.size
    np.testing.assert_array_equal(x[g == 1].size, 8)
    assert set(np.round(x[g == 1], 12)) == set(np.round(out.ravel(), 12))


# --- dense / activations / softmax -----------------------------------------------


def test_dense_identity_and_offset(rng):
    x = rng.standard_normal(5)
    np.testing.assert_array_equal(dense(x, LayerParams(np.eye(5), np.zeros(5), "dense")), x)
    b = rng.standard_normal(3)
    np.testing.assert_array_equal(dense(x, LayerParams(np.zeros((3, 5)), b, "dense")), b)


def test_dense_matches_loop(rng):
    w, b, x = rng.standard_normal((4, 8)), rng.standard_normal(4), rng.standard_normal(8)
    want = [b[i] + sum(w[i, j] * x[j] for j in range(8)) for i in range(4)]
    np.testing.assert_allclose(dense(x, LayerParams(w, b, "dense")), want, rtol=1e-6)


def test_dense_length_mismatch():
    with pytest.raises(ShapeError):
        dense(np.zeros(7), LayerParams(np.zeros((4, 8)), np.zeros(4), "dense"))


def test_activations():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(activate(x, "relu"), [0.0, 0.0, 3.0])
    s = activate(np.array([-800.0, 0.0, 800.0]), "sigmoid")
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(s))
    with pytest.raises(ValueError):
        activate(x, "tanh")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=2, max_size=8))
def test_softmax_normalises(z):
    p = softmax(np.array(z))
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


# --- networks and gradients -----------------------------------------------------


def small_net(rng, dtype=np.float64):
    return Network([
        Conv3D(init_conv(rng, 1, 2, 3, dtype)),
        Activation("relu"),
        MaxPool3D(2),
        Conv3D(init_conv(rng, 2, 3, 1, dtype)),
        Activation("sigmoid"),
        Flatten(),
        Dense(init_dense(rng, 3 * 8, 3, dtype)),
    ])


def quadratic_loss(target):
    def loss(out):
        d = out - target
        return 0.5 * float(np.sum(d * d)), d
    return loss


def test_network_gradients_match_finite_differences(rng, backend):
    net = small_net(rng)
    x = rng.standard_normal((2, 1, 6, 6, 6))
    loss = quadratic_loss(rng.standard_normal((2, 3)))
    _, dout = loss(net.forward(x))
    net.backward(dout)
    numeric = finite_diff_grad(net, x, lambda out: loss(out)[0], epsilon=1e-6)
    assert relative_error(net.gradients(), numeric) < 1e-6


def test_input_gradient(rng):
    net = Network([Dense(init_dense(rng, 4, 2, np.float64)), Activation("sigmoid")])
    x = rng.standard_normal((1, 4))
    loss = quadratic_loss(np.zeros((1, 2)))
    _, d = loss(net.forward(x))
    grads = backward(net, x, d)
    assert [g.shape for g in grads] == [q.shape for q in net.parameters()]
    gx = net.backward(d)
    eps = 1e-6
    num = np.zeros_like(x)
    for i in range(4):
        xp, xm = x.copy(), x.copy()
        xp[0, i] += eps
        xm[0, i] -= eps
        num[0, i] = (loss(net.forward(xp))[0] - loss(net.forward(xm))[0]) / (2 * eps)
    np.testing.assert_allclose(gx, num, rtol=1e-6, atol=1e-9)


def test_backward_before_forward(rng):
    with pytest.raises(StateError):
        small_net(rng).backward(np.zeros((1, 3)))


def test_output_shape_names_failing_layer(rng):
    net = small_net(rng)
    with pytest.raises(ShapeError, match="layer 2"):
        net.output_shape((1, 5, 5, 5))


def test_astype_and_copy_are_independent(rng):
    net = small_net(rng, np.float32)
    cp = net.copy()
    cp.parameters()[0][...] = 0
    assert np.any(net.parameters()[0] != 0)
    assert net.astype(np.float64).parameters()[0].dtype == np.float64


def test_sgd_update_momentum():
    w = np.array([1.0, 2.0])
    v = [np.zeros(2)]
    sgd_update([w], [np.array([1.0, -1.0])], v, lr=0.1, momentum=0.5)
    sgd_update([w], [np.array([1.0, -1.0])], v, lr=0.1, momentum=0.5)
    # v1 = g, v2 = 0.5 g + g
    np.testing.assert_allclose(w, [1.0 - 0.1 - 0.15, 2.0 + 0.1 + 0.15])


def test_sgd_zero_lr_is_a_no_op(rng):
    params = [rng.standard_normal(3)]
    before = params[0].copy()
    opt = SGD(params, lr=0.0)
    for _ in range(5):
        opt.step([rng.standard_normal(3)])
    np.testing.assert_array_equal(params[0], before)


def test_sgd_rejects_bad_gradients():
    w = np.zeros(2)
    with pytest.raises(NonFiniteError):
        sgd_update([w], [np.array([np.nan, 0.0])], [np.zeros(2)], 0.1, 0.9)
    with pytest.raises(ShapeError):
        sgd_update([w], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9)


def test_shape_algebra_matches_actual_shapes(rng):
    for D in range(4, 17):
        x = rng.standard_normal((1, 1, D, D, D)).astype(np.float32)
        for k in (1, 3, 5):
            if k > D:
                continue
            for stride in (1, 2):
                conv = Conv3D(init_conv(rng, 1, 2, k), stride)
                out = conv.forward(x, keep=False)
                assert out.shape[1:] == conv.output_shape((1, D, D, D))
                for w in (2, 3):
                    pool = MaxPool3D(w)
                    if out.shape[2] % w:
                        with pytest.raises(ShapeError):
                            pool.output_shape(out.shape[1:])
                    else:
                        assert pool.forward(out, keep=False).shape[1:] == pool.output_shape(out.shape[1:])
