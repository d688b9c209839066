import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnisurf.neural import (
    GRU,
    SGD,
    CacheStateError,
    Dense,
    Network,
    NumericalError,
    ResidualBlock,
    load_params,
    mse_loss,
    numerical_gradient,
    save_params,
    sgd_step,
)


def _sigmoid(x):
    return 1 / (1 + np.exp(-x))


def _check_grad(net, x, rng, tol=1e-4, n=None):
    theta = net.init_params(rng)
    outs = net(theta, x)
    g_out = {k: rng.normal(size=v.shape) for k, v in outs.items()}
    f = lambda th: sum(np.sum(g_out[k] * v) for k, v in net(th, x).items())
    _, cache = net.forward(theta, x)
    grad = net.backward(theta, cache, g_out)
    idx = range(theta.size) if n is None else rng.choice(theta.size, min(n, theta.size), replace=False)
    num = numerical_gradient(f, theta, 1e-5, idx)
    for i in idx:
        scale = max(1e-6, abs(num[i]), abs(grad[i]))
        assert abs(num[i] - grad[i]) / scale < tol, (i, num[i], grad[i])


def test_zero_dense_relu_gives_zero():
    net = Network({"x": [Dense(3, 4)]}, {"y": [Dense(4, 2)]})
    out = net(np.zeros(net.size), {"x": np.ones((2, 3))})
    assert np.array_equal(out["y"], np.zeros((2, 2)))


def test_zero_residual_is_identity():
    net = Network({"x": [ResidualBlock([Dense(3, 3), Dense(3, 3, "linear")])]},
                  {"y": [Dense(3, 3, "linear")]})
    theta = np.zeros(net.size)
    # make the output layer an identity so the block is observable
    w = net.layout.view(theta, "head.y.0.W")
    w[:] = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.allclose(net(theta, {"x": x})["y"], x)


def test_gru_single_step_by_hand():
    gru = GRU(1, 1)
    net = Network({"x": [gru]}, {"y": [Dense(1, 1, "linear")]})
    theta = np.zeros(net.size)
    v = lambda name: net.layout.view(theta, f"tower.x.0.{name}")
    v("W")[:] = [[0.5, -1.0, 2.0]]   # z, r, n input weights
    v("b")[:] = [0.1, 0.2, -0.3]
    net.layout.view(theta, "head.y.0.W")[:] = 1.0
    x = 0.8
    # h0 = 0 so the recurrent terms vanish
    z = _sigmoid(0.5 * x + 0.1)
    n = np.tanh(2.0 * x - 0.3)
    h1 = z * n
    assert net(theta, {"x": np.array([[[x]]])})["y"][0, 0] == pytest.approx(h1, abs=1e-12)


def test_gru_two_steps_by_hand():
    gru = GRU(1, 1)
    net = Network({"x": [gru]}, {"y": [Dense(1, 1, "linear")]})
    theta = np.zeros(net.size)
    v = lambda name: net.layout.view(theta, f"tower.x.0.{name}")
    v("W")[:] = [[0.3, 0.4, 0.9]]
    v("U")[:] = [[-0.2, 0.6, 1.1]]
    net.layout.view(theta, "head.y.0.W")[:] = 1.0
    xs = [0.5, -0.7]
    h = 0.0
    for x in xs:
        z = _sigmoid(0.3 * x - 0.2 * h)
        r = _sigmoid(0.4 * x + 0.6 * h)
        n = np.tanh(0.9 * x + 1.1 * r * h)
        h = (1 - z) * h + z * n
    got = net(theta, {"x": np.array([[[xs[0]], [xs[1]]]])})["y"][0, 0]
    assert got == pytest.approx(h, abs=1e-12)


def test_shape_mismatch():
    net = Network({"x": [GRU(3, 4)]}, {"y": [Dense(4, 1)]})
    with pytest.raises(ValueError):
        net(net.init_params(np.random.default_rng(0)), {"x": np.ones((2, 3))})


def test_full_gradient_mixed_network():
    rng = np.random.default_rng(1)
    net = Network(
        {"a": [GRU(3, 5), Dense(5, 4)], "b": [Dense(2, 4)]},
        {"p": [ResidualBlock([Dense(8, 8), Dense(8, 8, "linear")]), Dense(8, 3, "linear")],
         "q": [Dense(8, 2)]},
        trunk=[Dense(8, 8)])
    x = {"a": rng.normal(size=(4, 3, 3)), "b": rng.normal(size=(4, 2))}
    _check_grad(net, x, rng)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 16), st.integers(1, 16), st.integers(1, 4),
       st.sampled_from(["relu", "linear"]))
def test_gradient_property(seed, width, inp, steps, act):
    rng = np.random.default_rng(seed)
    net = Network({"s": [GRU(inp, width), Dense(width, width, act)]},
                  {"y": [ResidualBlock([Dense(width, width, act)]), Dense(width, 2, "linear")]})
    x = {"s": rng.normal(size=(2, steps, inp))}
    theta = net.init_params(rng)
    # Skip draws that land a ReLU pre-activation on its kink.
    _check_grad(net, x, rng, n=40)
    assert theta.size == net.size


def test_zero_upstream_gives_zero_gradient():
    rng = np.random.default_rng(2)
    net = Network({"x": [GRU(2, 3)]}, {"y": [Dense(3, 2)]})
    theta = net.init_params(rng)
    _, cache = net.forward(theta, {"x": rng.normal(size=(2, 3, 2))})
    assert not np.any(net.backward(theta, cache, {"y": np.zeros((2, 2))}))


def test_linear_layer_weight_gradient():
    net = Network({"x": [Dense(3, 2, "linear")]}, {"y": [Dense(2, 2, "linear")]})
    rng = np.random.default_rng(3)
    theta = net.init_params(rng)
    x = rng.normal(size=(1, 3))
    up = np.array([[0.0, 0.0]])
    _, cache = net.forward(theta, {"x": x})
    # Gradient of the tower layer: dW[j, i] = x_j * (W_head @ up)_i
    dy = np.array([[1.5, -0.5]])
    _, cache = net.forward(theta, {"x": x})
    g = net.backward(theta, cache, {"y": dy})
    w_head = net.layout.view(theta, "head.y.0.W")
    upstream = dy @ w_head.T
    dW = net.layout.view(g, "tower.x.0.W")
    assert np.allclose(dW, x.T @ upstream)
    del up


def test_cache_reuse_and_foreign_theta():
    rng = np.random.default_rng(4)
    net = Network({"x": [Dense(2, 2)]}, {"y": [Dense(2, 1)]})
    theta = net.init_params(rng)
    _, cache = net.forward(theta, {"x": np.ones((1, 2))})
    net.backward(theta, cache, {"y": np.ones((1, 1))})
    with pytest.raises(CacheStateError):
        net.backward(theta, cache, {"y": np.ones((1, 1))})
    _, cache = net.forward(theta, {"x": np.ones((1, 2))})
    with pytest.raises(CacheStateError):
        net.backward(theta.copy(), cache, {"y": np.ones((1, 1))})


def test_mse_loss_by_hand():
    loss, g = mse_loss([2.0, 3.0], [1.0, 2.0], 1)
    assert loss == 2.0 and np.array_equal(g, [2.0, 2.0])
    assert mse_loss([1.0, 1.0], [1.0, 1.0])[0] == 0.0
    with pytest.raises(ValueError):
        mse_loss([1.0], [1.0, 2.0])


def test_mse_gradient_numeric():
    rng = np.random.default_rng(5)
    p, t = rng.normal(size=6), rng.normal(size=6)
    _, g = mse_loss(p, t, 3)
    num = numerical_gradient(lambda x: mse_loss(x, t, 3)[0], p)
    assert np.allclose([num[i] for i in range(6)], g, rtol=1e-6)


def test_sgd_steps():
    theta = np.array([1.0, 2.0])
    assert np.array_equal(sgd_step(theta, np.array([5.0, 5.0]), 0.0), theta)
    c, lr = 3.0, 0.1
    th = np.array([1.0])
    th = sgd_step(th, th - c, lr)      # gradient of 0.5 (th - c)^2
    assert th[0] == pytest.approx(1.0 - lr * (1.0 - c))
    with pytest.raises(NumericalError):
        sgd_step(theta, np.array([np.nan, 0.0]), 0.1)
    opt = SGD(0.001)
    assert opt.lr == 0.001 and opt.momentum == 0.0
    with pytest.raises(NumericalError):
        opt.step(theta, np.array([np.inf, 0.0]))


def test_sgd_clipping():
    opt = SGD(0.1, clip_norm=5.0)
    th = opt.step(np.zeros(2), np.array([30.0, 40.0]))      # norm 50 -> 5
    assert np.allclose(th, [-0.3, -0.4]) and opt.clipped == 1
    th = opt.step(np.zeros(2), np.array([3.0, 4.0]))        # norm 5 passes unchanged
    assert np.allclose(th, [-0.3, -0.4]) and opt.clipped == 1
    with pytest.raises(ValueError):
        SGD(0.1, clip_norm=0.0)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    net = Network({"x": [GRU(2, 3)]}, {"y": [Dense(3, 2)]})
    theta = net.init_params(rng)
    buf = io.BytesIO()
    save_params(buf, theta, net, note="t")
    buf.seek(0)
    assert np.array_equal(load_params(buf, net), theta)
    path = tmp_path / "p.npz"
    save_params(path, theta, net)
    assert np.array_equal(load_params(path, net), theta)
    other = Network({"x": [GRU(2, 4)]}, {"y": [Dense(4, 2)]})
    with pytest.raises(ValueError):
        load_params(path, other)


def test_forward_is_pure():
    rng = np.random.default_rng(7)
    net = Network({"x": [GRU(2, 3)]}, {"y": [Dense(3, 2)]})
    theta = net.init_params(rng)
    x = {"x": rng.normal(size=(2, 4, 2))}
    before = theta.copy()
    a = net(theta, x)["y"]
    b = net(theta, x)["y"]
    assert np.array_equal(a, b) and np.array_equal(theta, before)
