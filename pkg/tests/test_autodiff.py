import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dixongan import autodiff as ad
from dixongan.errors import ShapeError
from oracles import conv3d_loops, numeric_grad, rel_err, tconv3d_loops

RTOL = 1e-4


def leaf(rng, shape, scale=1.0):
    return ad.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def conv_params(rng, cout, cin, stride=2, padding=1, transposed=False):
    shape = (cin, cout) if transposed else (cout, cin)
    nb = cout
    return ad.ConvParams(leaf(rng, shape + (4, 4, 4), 0.3), leaf(rng, (nb,), 0.3),
                         stride, padding, transposed)


def check_gradients(loss_fn, leaves):
    """Analytic gradients of ``loss_fn()`` vs central differences."""
    for t in leaves:
        t.grad = None
    loss_fn().backward()
    for t in leaves:
        num = numeric_grad(lambda: loss_fn().item(), t.values)
        assert rel_err(t.grad, num) < RTOL, t.name


def weighted_sum(y):
    # fixed random projection so the loss depends on every output voxel
    r = np.random.default_rng(99).normal(size=y.shape)
    return ad.sum(ad.mul(y, r))


# -- conv3d -------------------------------------------------------------------

def test_conv_output_size_example():
    rng = np.random.default_rng(0)
    p = conv_params(rng, 3, 1)
    assert ad.conv3d(ad.Tensor(rng.normal(size=(1, 1, 8, 8, 8))), p).shape == (1, 3, 4, 4, 4)
    assert ad.conv_output_size(8, 2, 1) == 4 and ad.conv_output_size(15, 1, 0) == 12


def test_conv_zero_weights_zero_output():
    rng = np.random.default_rng(1)
    p = ad.ConvParams(ad.Tensor(np.zeros((2, 3, 4, 4, 4))), ad.Tensor(np.zeros(2)))
    out = ad.conv3d(ad.Tensor(rng.normal(size=(2, 3, 6, 6, 6))), p)
    assert np.all(out.values == 0)


@pytest.mark.parametrize("cin,cout,n,stride,padding",
                         [(1, 1, 5, 1, 1), (1, 2, 5, 2, 1), (3, 2, 6, 1, 0), (2, 3, 7, 2, 1)])
def test_conv_matches_loops(cin, cout, n, stride, padding):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, cin, n, n, n))
    p = conv_params(rng, cout, cin, stride, padding)
    got = ad.conv3d(ad.Tensor(x), p).values
    want = conv3d_loops(x, p.weight.values, p.bias.values, stride, padding)
    assert rel_err(got, want) < 1e-10


def test_conv_channel_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(ShapeError):
        ad.conv3d(ad.Tensor(np.zeros((1, 2, 8, 8, 8))), conv_params(rng, 2, 3))


def test_conv_params_validation():
    with pytest.raises(ShapeError):
        ad.ConvParams(ad.Tensor(np.zeros((1, 1, 3, 3, 3))), ad.Tensor(np.zeros(1)))
    with pytest.raises(ValueError):
        ad.ConvParams(ad.Tensor(np.zeros((1, 1, 4, 4, 4))), ad.Tensor(np.zeros(1)), stride=3)
    with pytest.raises(ShapeError):
        ad.ConvParams(ad.Tensor(np.zeros((2, 1, 4, 4, 4))), ad.Tensor(np.zeros(1)))


# -- tconv3d ------------------------------------------------------------------------

def test_tconv_output_size_example():
    rng = np.random.default_rng(4)
    p = conv_params(rng, 5, 3, transposed=True)
    out = ad.tconv3d(ad.Tensor(rng.normal(size=(1, 3, 4, 4, 4))), p)
    assert out.shape == (1, 5, 8, 8, 8)


@pytest.mark.parametrize("stride,padding", [(2, 1), (1, 1), (2, 0)])
def test_tconv_matches_scatter_loops(stride, padding):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 3, 4, 3))
    p = conv_params(rng, 3, 2, stride, padding, transposed=True)
    got = ad.tconv3d(ad.Tensor(x), p).values
    want = tconv3d_loops(x, p.weight.values, p.bias.values, stride, padding)
    assert rel_err(got, want) < 1e-10


def test_tconv_zero_input_gives_bias():
    rng = np.random.default_rng(6)
    p = conv_params(rng, 3, 2, transposed=True)
    out = ad.tconv3d(ad.Tensor(np.zeros((1, 2, 4, 4, 4))), p).values
    np.testing.assert_array_equal(out, np.broadcast_to(p.bias.values.reshape(1, 3, 1, 1, 1),
                                                       out.shape))


@pytest.mark.parametrize("stride", [1, 2])
def test_adjoint_identity(stride):
    rng = np.random.default_rng(7)
    w = rng.normal(size=(3, 2, 4, 4, 4))
    zero = ad.Tensor(np.zeros(3))
    x = rng.normal(size=(2, 2, 8, 8, 8))
    conv = ad.ConvParams(ad.Tensor(w), zero, stride, 1)
    y_sp = ad.conv_output_size(8, stride, 1)
    y = rng.normal(size=(2, 3, y_sp, y_sp, y_sp))
    lhs = np.sum(ad.conv3d(ad.Tensor(x), conv).values * y)
    tconv = ad.ConvParams(ad.Tensor(w), ad.Tensor(np.zeros(2)), stride, 1, transposed=True)
    back = ad.tconv3d(ad.Tensor(y), tconv).values
    assert back.shape == x.shape
    rhs = np.sum(x * back)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


@settings(max_examples=15, deadline=None)
@given(st.tuples(*[st.integers(2, 8).map(lambda v: 2 * v)] * 3))
def test_conv_tconv_shape_algebra(dims):
    rng = np.random.default_rng(8)
    x = ad.Tensor(rng.normal(size=(1, 1) + dims))
    y = ad.conv3d(x, conv_params(rng, 2, 1))
    z = ad.tconv3d(y, conv_params(rng, 1, 2, transposed=True))
    assert z.shape[2:] == dims


# -- elementwise ----------------------------------------------------------------------------

def test_activation_values():
    x = ad.Tensor(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_allclose(ad.leaky_relu(x, 0.2).values, [-0.2, 0.0, 2.0])
    np.testing.assert_allclose(ad.relu(x).values, [0.0, 0.0, 2.0])
    assert ad.sigmoid(ad.Tensor(np.array(0.0))).item() == 0.5
    big = ad.sigmoid(ad.Tensor(np.array([-1000.0, 1000.0]))).values
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0


def test_tanh_gradient_at_zero():
    x = ad.Tensor(np.array([0.0]), requires_grad=True)
    ad.sum(ad.tanh(x)).backward()
    num = numeric_grad(lambda: float(np.tanh(x.values).sum()), x.values)
    assert x.grad[0] == 1.0
    assert abs(num[0] - 1.0) < 1e-6


def _away_from_kinks(rng, shape):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < 0.05, 0.3, v)


@pytest.mark.parametrize("op", [ad.relu, ad.sigmoid, ad.tanh, ad.square, ad.absolute,
                                lambda t: ad.leaky_relu(t, 0.2),
                                lambda t: ad.sqrt(ad.square(t))])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(9)
    x = ad.Tensor(_away_from_kinks(rng, (2, 3, 2, 2, 2)), requires_grad=True, name="x")
    check_gradients(lambda: weighted_sum(op(x)), [x])


def test_binary_gradients():
    rng = np.random.default_rng(10)
    a, b = leaf(rng, (2, 2, 3)), leaf(rng, (2, 2, 3))

    def loss():
        return ad.mean(ad.mul(ad.sub(a, b), ad.add(a, ad.mul(b, 2.0)))) + ad.sum(a * 0.5)
    check_gradients(loss, [a, b])


def test_concat_and_channel_gradients():
    rng = np.random.default_rng(11)
    a, b = leaf(rng, (2, 1, 3, 3, 3)), leaf(rng, (2, 2, 3, 3, 3))

    def loss():
        c = ad.concat([a, b], axis=1)
        return weighted_sum(ad.mul(ad.channel(c, 2), ad.channel(c, 0)))
    check_gradients(loss, [a, b])


@pytest.mark.parametrize("target", [0.0, 1.0])
def test_bce_gradient_and_value(target):
    rng = np.random.default_rng(12)
    x = leaf(rng, (2, 1, 3, 3, 3), 3.0)
    check_gradients(lambda: ad.bce_with_logits(x, target), [x])
    p = 1 / (1 + np.exp(-x.values))
    want = -np.mean(target * np.log(p) + (1 - target) * np.log(1 - p))
    assert ad.bce_with_logits(x, target).item() == pytest.approx(want, rel=1e-12)


def test_bce_extreme_logits_finite():
    x = ad.Tensor(np.array([-800.0, 800.0]))
    assert ad.bce_with_logits(x, 1.0).item() == pytest.approx(400.0)


# -- conv gradients ---------------------------------------------------------------------

@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride):
    rng = np.random.default_rng(13)
    x = leaf(rng, (2, 2, 5, 5, 5))
    x.name = "x"
    p = conv_params(rng, 2, 2, stride)
    p.weight.name, p.bias.name = "w", "b"
    check_gradients(lambda: ad.sum(ad.conv3d(x, p)), [x, p.weight, p.bias])
    check_gradients(lambda: weighted_sum(ad.conv3d(x, p)), [x, p.weight, p.bias])


@pytest.mark.parametrize("stride", [1, 2])
def test_tconv_gradients(stride):
    rng = np.random.default_rng(14)
    x = leaf(rng, (2, 2, 3, 3, 3))
    p = conv_params(rng, 2, 2, stride, transposed=True)
    check_gradients(lambda: weighted_sum(ad.tconv3d(x, p)), [x, p.weight, p.bias])


# -- normalisation ----------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["instance", "batch"])
def test_norm_constant_channel_gives_beta(mode):
    beta = ad.Tensor(np.array([0.3, -0.7]))
    out = ad.norm_layer(ad.Tensor(np.full((2, 2, 3, 3, 3), 5.0)),
                        ad.Tensor(np.array([2.0, 3.0])), beta, mode)
    np.testing.assert_allclose(out.values, np.broadcast_to(beta.values.reshape(1, 2, 1, 1, 1),
                                                           out.shape))


def test_norm_standardised_input_unchanged():
    rng = np.random.default_rng(15)
    v = rng.normal(size=(1, 2, 6, 6, 6))
    v = (v - v.mean(axis=(2, 3, 4), keepdims=True)) / v.std(axis=(2, 3, 4), keepdims=True)
    out = ad.norm_layer(ad.Tensor(v), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)))
    assert np.max(np.abs(out.values - v)) < 1e-4


@pytest.mark.parametrize("mode", ["instance", "batch"])
def test_norm_gradients(mode):
    rng = np.random.default_rng(16)
    x = leaf(rng, (2, 2, 2, 2, 2))
    gamma, beta = leaf(rng, (2,)), leaf(rng, (2,))
    check_gradients(lambda: weighted_sum(ad.norm_layer(x, gamma, beta, mode)), [x, gamma, beta])


def test_norm_rejects_bad_affine():
    with pytest.raises(ShapeError):
        ad.norm_layer(ad.Tensor(np.zeros((1, 2, 2, 2, 2))), ad.Tensor(np.ones(3)),
                      ad.Tensor(np.zeros(3)))


# -- backward contract -------------------------------------------------------------------------

def test_sum_gradient_is_ones():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_twice_doubles():
    rng = np.random.default_rng(17)
    x = leaf(rng, (1, 1, 4, 4, 4))
    p = conv_params(rng, 2, 1)
    loss = weighted_sum(ad.conv3d(x, p))
    loss.backward()
    first = p.weight.grad.copy(), x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(p.weight.grad, 2 * first[0])
    np.testing.assert_array_equal(x.grad, 2 * first[1])


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        ad.Tensor(np.ones(3), requires_grad=True).backward()


def test_shared_subgraph_visited_once():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = ad.square(x)
    ad.sum(ad.add(y, y)).backward()  # d/dx 2x^2 = 4x
    assert x.grad[0] == 8.0


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert y.is_leaf


def test_forward_and_gradients_deterministic():
    def run():
        rng = np.random.default_rng(18)
        x = leaf(rng, (2, 2, 6, 6, 6))
        p = conv_params(rng, 3, 2)
        weighted_sum(ad.leaky_relu(ad.conv3d(x, p))).backward()
        return p.weight.grad.tobytes() + x.grad.tobytes()
    assert run() == run()
