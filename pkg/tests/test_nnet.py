import numpy as np
import pytest

from rgmap.nnet import (
    AdamState,
    ConvBlock,
    ConvLayer,
    TrainingDivergenceError,
    adam_step,
    check_gradients,
    conv2d_backward,
    conv2d_forward,
    he_conv,
    l2_loss,
    l2_loss_grad,
    load_weights,
    nrmse_loss,
    nrmse_loss_grad,
    relative_error,
    relu_backward,
    relu_forward,
    save_weights,
)


def _naive_conv(w, b, x):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for s in range(n):
        for o in range(w.shape[0]):
            for i in range(h):
                for j in range(wd):
                    out[s, o, i, j] = b[o] + np.sum(w[o] * xp[s, :, i:i + 3, j:j + 3])
    return out


def test_identity_kernel():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    x = np.random.default_rng(0).standard_normal((1, 7, 9))
    out, _ = conv2d_forward(ConvLayer(w, np.zeros(1)), x)
    np.testing.assert_array_equal(out, x)


def test_zero_weights_bias():
    out, _ = conv2d_forward(ConvLayer(np.zeros((2, 3, 3, 3)), np.array([1.5, -2.0])), np.ones((3, 5, 5)))
    assert np.all(out[0] == 1.5) and np.all(out[1] == -2.0)


@pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 3, 5, 7)])
def test_conv_matches_nested_loops(shape):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((2, shape[1], 3, 3))
    b = rng.standard_normal(2)
    out, _ = conv2d_forward(ConvLayer(w, b), x)
    np.testing.assert_allclose(out, _naive_conv(w, b, x), atol=1e-12)


def test_conv_linear_in_input():
    rng = np.random.default_rng(2)
    layer = he_conv(3, 4, rng)
    x, z = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 3, 6, 6))
    f = lambda v: conv2d_forward(layer, v)[0]
    np.testing.assert_allclose(f(2 * x - 3 * z), 2 * f(x) - 3 * f(z), atol=1e-12)


def test_conv_shape_errors():
    layer = he_conv(3, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        conv2d_forward(layer, np.zeros((2, 6, 6)))
    with pytest.raises(ValueError):
        ConvLayer(np.zeros((2, 2, 5, 5)), np.zeros(2))
    with pytest.raises(ValueError):
        ConvLayer(np.zeros((2, 2, 3, 3)), np.zeros(3))


def test_conv_backward_finite_difference():
    rng = np.random.default_rng(3)
    layer = ConvLayer(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    x = rng.standard_normal((2, 2, 5, 6))
    r = rng.standard_normal((2, 3, 5, 6))
    out, cache = conv2d_forward(layer, x)
    gx, gw, gb = conv2d_backward(cache, r)

    def f(ps):
        return float(np.sum(r * conv2d_forward(ConvLayer(ps[1], ps[2]), ps[0])[0]))

    worst = check_gradients(f, [x, layer.weights, layer.bias], [gx, gw, gb])
    assert max(worst) < 1e-6


def test_relu():
    out, pre = relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(pre, np.ones(3)), [0, 0, 1])


def test_two_block_gradcheck():
    rng = np.random.default_rng(4)
    b1 = ConvBlock.init(2, 4, 3, rng)
    b2 = ConvBlock.init(5, 4, 2, rng)
    x = rng.standard_normal((1, 2, 8, 8))
    target = rng.standard_normal((1, 2, 8, 8))
    params = b1.parameters() + b2.parameters()

    def forward(ps, xx):
        o1, c1 = b1.with_parameters(ps[:6]).forward(xx)
        o2, c2 = b2.with_parameters(ps[6:]).forward(np.concatenate([xx, o1], axis=1))
        return o1, c1, o2, c2

    def f(ps):
        return l2_loss(forward(ps, x)[2], target)

    o1, c1, o2, c2 = forward(params, x)
    gin2, g2 = b2.backward(c2, l2_loss_grad(o2, target))
    gin1, g1 = b1.backward(c1, gin2[:, 2:])
    worst = check_gradients(f, params, g1 + g2)
    assert max(worst) < 1e-4


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(5)
    blk = ConvBlock.init(2, 4, 3, rng)
    out, cache = blk.forward(rng.standard_normal((2, 8, 8)))
    gx, grads = blk.backward(cache, np.zeros_like(out))
    assert not np.any(gx) and all(not np.any(g) for g in grads)


def test_conv_block_structure():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        ConvBlock((he_conv(1, 2, rng), he_conv(2, 1, rng)))
    with pytest.raises(ValueError):
        ConvBlock((he_conv(1, 2, rng), he_conv(3, 1, rng), he_conv(1, 1, rng)))


def test_adam_first_step():
    p = [np.zeros(3)]
    new, st = adam_step(p, [np.ones(3)], AdamState.init(p))
    np.testing.assert_allclose(new[0], -5e-4, atol=1e-9)
    assert st.t == 1 and p[0].sum() == 0
    same, _ = adam_step(p, [np.zeros(3)], AdamState.init(p))
    np.testing.assert_array_equal(same[0], p[0])
    with pytest.raises(TrainingDivergenceError):
        adam_step(p, [np.array([0.0, np.nan, 0.0])], AdamState.init(p))


def test_adam_minimizes_quadratic():
    p = [np.array([3.0, -2.0])]
    st = AdamState.init(p, lr=0.05)
    for _ in range(500):
        p, st = adam_step(p, [2 * p[0]], st)
    assert np.abs(p[0]).max() < 1e-2


def test_losses():
    assert nrmse_loss(np.ones(4), np.ones(4)) == 0.0
    assert nrmse_loss(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 1.0
    assert nrmse_loss(np.array([1.0, 2.0]), np.array([2.0, 2.0])) == pytest.approx(1 / np.sqrt(8))
    with pytest.raises(ValueError):
        nrmse_loss(np.ones(2), np.zeros(2))
    x = np.ones((2, 3, 4, 4))
    assert l2_loss(x, x) == 0.0
    # each (sample, channel) image differs by 1 in every pixel: norm 4
    assert l2_loss(x, 0 * x) == pytest.approx(4.0)
    assert np.all(np.isfinite(l2_loss_grad(x, x)))


def test_loss_gradients_finite_difference():
    rng = np.random.default_rng(6)
    p = rng.standard_normal((3, 2, 4, 4))
    t = rng.standard_normal((3, 2, 4, 4))
    w = check_gradients(lambda ps: l2_loss(ps[0], t), [p], [l2_loss_grad(p, t)])
    assert w[0] < 1e-6
    w = check_gradients(lambda ps: nrmse_loss(ps[0], t, per_sample=True), [p], [nrmse_loss_grad(p, t, True)])
    assert w[0] < 1e-6
    pc = p + 1j * rng.standard_normal(p.shape)
    tc = t + 1j * rng.standard_normal(p.shape)
    g = nrmse_loss_grad(pc, tc)
    e = np.zeros_like(pc)
    e[1, 0, 2, 3] = 1e-6
    num_re = (nrmse_loss(pc + e, tc) - nrmse_loss(pc - e, tc)) / 2e-6
    num_im = (nrmse_loss(pc + 1j * e, tc) - nrmse_loss(pc - 1j * e, tc)) / 2e-6
    assert abs(num_re - g[1, 0, 2, 3].real) < 1e-7 and abs(num_im - g[1, 0, 2, 3].imag) < 1e-7


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0)[()] == pytest.approx(1e-6)
    assert relative_error(1.0, 1.0)[()] == 0.0


def test_weights_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    blk = ConvBlock.init(2, 4, 3, rng)
    save_weights(tmp_path / "w", blk.parameters(), {"kind": "block"})
    params, meta = load_weights(tmp_path / "w")
    assert meta == {"kind": "block"}
    for a, b in zip(params, blk.parameters()):
        assert a.tobytes() == b.tobytes()
