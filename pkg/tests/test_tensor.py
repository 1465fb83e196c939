import numpy as np
import pytest

from sideways import tensor as T
from sideways.gradcheck import central_difference, relative_error


def naive_conv(x, k, stride, padding):
    """Loop-based cross-correlation used as an independent oracle."""
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        x = np.pad(x, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for c in range(cout):
                patch = x[i * stride : i * stride + kh, j * stride : j * stride + kw, :]
                out[i, j, c] = np.sum(patch * k[:, :, :, c])
    return out


def naive_deconv(x, k, stride):
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    out = np.zeros(((h - 1) * stride + kh, (w - 1) * stride + kw, cout))
    for i in range(h):
        for j in range(w):
            out[i * stride : i * stride + kh, j * stride : j * stride + kw] += np.einsum("c,abcd->abd", x[i, j], k)
    return out


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("hw", [(5, 5), (6, 7)])
def test_conv_matches_loop_oracle(rng, stride, padding, hw):
    x = rng.standard_normal(hw + (2,))
    k = rng.standard_normal((3, 3, 2, 4))
    np.testing.assert_allclose(T.conv2d_forward(x, k, stride, padding), naive_conv(x, k, stride, padding),
                               rtol=1e-12, atol=1e-12)


def test_identity_kernel_is_identity(rng):
    x = rng.random((5, 5, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1
    np.testing.assert_array_equal(T.conv2d_forward(x, k), x)


def test_conv_batched_equals_unbatched(rng):
    x = rng.standard_normal((3, 6, 6, 2))
    k = rng.standard_normal((3, 3, 2, 2))
    batched = T.conv2d_forward(x, k, 2)
    for n in range(3):
        np.testing.assert_allclose(batched[n], T.conv2d_forward(x[n], k, 2))


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_vjp_finite_difference(rng, stride, padding):
    x = rng.standard_normal((5, 6, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    u = rng.standard_normal(T.conv2d_forward(x, k, stride, padding).shape)
    gx, gk = T.conv2d_vjp(x, k, u, stride, padding)
    f = lambda: float(np.sum(T.conv2d_forward(x, k, stride, padding) * u))
    assert relative_error(gx, central_difference(f, x)) < 1e-8
    assert relative_error(gk, central_difference(f, k)) < 1e-8


@pytest.mark.parametrize("stride", [1, 2])
def test_deconv_valid_matches_scatter_oracle(rng, stride):
    x = rng.standard_normal((3, 4, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    np.testing.assert_allclose(T.deconv2d_forward(x, k, stride, "valid"), naive_deconv(x, k, stride), atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_deconv_same_inverts_conv_shape(rng, stride):
    x = rng.standard_normal((4, 4, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    out = T.deconv2d_forward(x, k, stride)
    assert out.shape == (4 * stride, 4 * stride, 3)
    k2 = rng.standard_normal((3, 3, 3, 2))
    assert T.conv2d_forward(out, k2, stride).shape == x.shape


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_deconv_vjp_finite_difference(rng, stride, padding):
    x = rng.standard_normal((3, 3, 2))
    k = rng.standard_normal((3, 3, 2, 2))
    u = rng.standard_normal(T.deconv2d_forward(x, k, stride, padding).shape)
    gx, gk = T.deconv2d_vjp(x, k, u, stride, padding)
    f = lambda: float(np.sum(T.deconv2d_forward(x, k, stride, padding) * u))
    assert relative_error(gx, central_difference(f, x)) < 1e-8
    assert relative_error(gk, central_difference(f, k)) < 1e-8


def test_deconv_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, deconv(y)> with the transposed kernel
    x = rng.standard_normal((6, 6, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    y = rng.standard_normal((3, 3, 3))
    lhs = np.sum(T.conv2d_forward(x, k, 2) * y)
    rhs = np.sum(x * T.deconv2d_forward(y, k.transpose(0, 1, 3, 2), 2)[:6, :6])
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_relu_subgradient_zero_at_zero():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(T.relu_vjp(x, np.ones(3)), [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(T.relu_forward(x), [0.0, 0.0, 2.0])


def test_pool_and_linear_vjps(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    u = rng.standard_normal((2, 4))
    f = lambda: float(np.sum(T.global_avg_pool_forward(x) * u))
    assert relative_error(T.global_avg_pool_vjp(x, u), central_difference(f, x)) < 1e-9

    z, w, b = rng.standard_normal((2, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
    g = rng.standard_normal((2, 3))
    gx, gw, gb = T.linear_vjp(z, w, g, b)
    f = lambda: float(np.sum(T.linear_forward(z, w, b) * g))
    for got, arr in [(gx, z), (gw, w), (gb, b)]:
        assert relative_error(got, central_difference(f, arr)) < 1e-9


def test_softmax_xent_uniform_logits():
    loss, grad = T.softmax_xent(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(grad, [0.25, 0.25, -0.75, 0.25])


def test_softmax_xent_batch_gradient(rng):
    z = rng.standard_normal((3, 5))
    labels = np.array([0, 4, 2])
    _, g = T.softmax_xent(z, labels)
    f = lambda: T.softmax_xent(z, labels)[0]
    assert relative_error(g, central_difference(f, z)) < 1e-8


def test_softmax_xent_is_stable_for_large_logits():
    loss, grad = T.softmax_xent(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_mse_value_and_gradient():
    loss, g = T.mse(np.array([1.0, 3.0]), np.array([0.0, 1.0]))
    assert loss == pytest.approx(2.5)
    np.testing.assert_allclose(g, [1.0, 2.0])


def test_dimension_errors_name_the_axis(rng):
    with pytest.raises(T.DimensionError, match="Cin"):
        T.conv2d_forward(rng.random((4, 4, 2)), rng.random((3, 3, 3, 1)))
    with pytest.raises(T.DimensionError, match="stride"):
        T.conv2d_forward(rng.random((4, 4, 1)), rng.random((3, 3, 1, 1)), stride=0)
    with pytest.raises(T.DimensionError, match="upstream H"):
        T.conv2d_vjp(rng.random((4, 4, 1)), rng.random((3, 3, 1, 1)), rng.random((3, 4, 1)))
    with pytest.raises(T.DimensionError, match="features"):
        T.linear_forward(rng.random(3), rng.random((4, 2)))


def test_non_finite_output_raises():
    with pytest.raises(T.NonFiniteError):
        T.conv2d_forward(np.full((3, 3, 1), np.inf), np.ones((3, 3, 1, 1)))


def test_precision_lookup():
    assert T.dtype_of("single") is np.float32
    with pytest.raises(ValueError):
        T.dtype_of("half")
