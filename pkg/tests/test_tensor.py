"""Autodiff engine checks against finite differences and hand oracles."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff_scalar, rel_err
from dplab import tensor as T

FD_TOL = 1e-4  # central differences at h=1e-5 against analytic gradients


def leaf(v):
    return T.Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)


def grad_value(out, wrt):
    return [g.value for g in T.grad(out, wrt)]


# ---------------------------------------------------------------------------
# forward values


def test_elementwise_forward_values():
    a = leaf([[1.0, -2.0], [3.0, 0.5]])
    b = leaf([[2.0, 2.0], [2.0, 2.0]])
    np.testing.assert_array_equal(T.add(a, b).value, [[3.0, 0.0], [5.0, 2.5]])
    np.testing.assert_array_equal(T.sub(a, b).value, [[-1.0, -4.0], [1.0, -1.5]])
    np.testing.assert_array_equal(T.mul(a, b).value, [[2.0, -4.0], [6.0, 1.0]])
    np.testing.assert_array_equal(T.neg(a).value, [[-1.0, 2.0], [-3.0, -0.5]])
    np.testing.assert_array_equal(T.square(a).value, [[1.0, 4.0], [9.0, 0.25]])
    np.testing.assert_array_equal(T.mul_const(a, 3.0).value, [[3.0, -6.0], [9.0, 1.5]])
    np.testing.assert_array_equal(T.add_const(a, 1.0).value, [[2.0, -1.0], [4.0, 1.5]])


def test_reductions_forward_values():
    a = leaf([[1.0, 2.0], [3.0, 4.0]])
    assert T.sum_all(a).item() == 10.0
    assert T.mean_all(a).item() == 2.5
    np.testing.assert_array_equal(T.sum_axes(a, (0,)).value, [4.0, 6.0])
    np.testing.assert_array_equal(T.sum_axes(a, (1,)).value, [3.0, 7.0])
    np.testing.assert_array_equal(T.sum_axes(a, (0, 1)).value, 10.0)


def test_matmul_rank_combinations_match_numpy():
    rng = np.random.default_rng(0)
    a2 = rng.normal(size=(3, 4))
    b2 = rng.normal(size=(4, 5))
    a3 = rng.normal(size=(2, 3, 4))
    b3 = rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose(T.matmul(leaf(a2), leaf(b2)).value, a2 @ b2, rtol=1e-13)
    np.testing.assert_allclose(T.matmul(leaf(a3), leaf(b2)).value, a3 @ b2, rtol=1e-13)
    np.testing.assert_allclose(T.matmul(leaf(a3), leaf(b3)).value, a3 @ b3, rtol=1e-13)
    np.testing.assert_allclose(T.matmul(leaf(a2), leaf(b3)).value, a2 @ b3, rtol=1e-13)


def test_matmul_shape_errors():
    a = leaf(np.zeros((3, 4)))
    b = leaf(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        T.matmul(a, b)
    with pytest.raises(ValueError):
        T.matmul(leaf(np.zeros(3)), leaf(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        T.matmul(leaf(np.zeros((2, 3, 4))), leaf(np.zeros((3, 4, 5))))


def test_nonlinearity_forward_values():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    a = leaf(x)
    np.testing.assert_allclose(T.tanh(a).value, np.tanh(x), rtol=1e-15)
    np.testing.assert_allclose(T.sigmoid(a).value, 1 / (1 + np.exp(-x)), rtol=1e-15)
    np.testing.assert_allclose(T.exp(a).value, np.exp(x), rtol=1e-15)
    np.testing.assert_array_equal(
        T.leaky_relu(a, 0.2).value, np.where(x > 0, x, 0.2 * x)
    )
    with pytest.raises(ValueError):
        T.log(leaf([1.0, 0.0]))


def test_sqrt_guard_forward_and_zero_subgradient():
    a = leaf([4.0, 0.0, 1e-30])
    out = T.sqrt_guard0(a)
    np.testing.assert_allclose(out.value, [2.0, 0.0, 1e-15], rtol=1e-15)
    (g,) = grad_value(T.sum_all(out), [a])
    # at and near zero the subgradient is pinned to 0, elsewhere 1/(2 sqrt)
    np.testing.assert_array_equal(g, [0.25, 0.0, 0.0])


# ---------------------------------------------------------------------------
# first-order gradients against central differences


def scalar_fn_check(build, x0, tol=FD_TOL):
    """build(tensor) -> scalar Tensor; compares grad to finite differences."""

    def f(v):
        return build(T.Tensor(v, requires_grad=True)).item()

    a = leaf(x0)
    out = build(a)
    (g,) = grad_value(out, [a])
    fd = central_diff_scalar(f, np.asarray(x0, dtype=np.float64))
    denom = max(np.linalg.norm(fd), 1e-12)
    assert np.linalg.norm(g - fd) / denom < tol


def test_gradients_elementwise_chain():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(3, 4))
    scalar_fn_check(lambda a: T.sum_all(T.mul(T.square(a), T.add_const(a, 0.3))), x0)
    scalar_fn_check(lambda a: T.mean_all(T.tanh(T.mul_const(a, 1.7))), x0)
    scalar_fn_check(lambda a: T.sum_all(T.sigmoid(a)), x0)
    scalar_fn_check(lambda a: T.sum_all(T.exp(T.mul_const(a, 0.5))), x0)
    scalar_fn_check(lambda a: T.sum_all(T.log(T.add_const(T.square(a), 1.0))), x0)
    scalar_fn_check(lambda a: T.sum_all(T.pow_const(T.add_const(T.square(a), 1.0), 1.5)), x0)
    scalar_fn_check(lambda a: T.sum_all(T.leaky_relu(a, 0.2)), x0)


def test_gradients_shape_ops():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(2, 3, 4))
    scalar_fn_check(lambda a: T.sum_all(T.square(T.reshape(a, (6, 4)))), x0)
    scalar_fn_check(lambda a: T.sum_all(T.square(T.transpose(a, (2, 0, 1)))), x0)
    scalar_fn_check(lambda a: T.sum_all(T.square(T.sum_axes(a, (1,)))), x0)
    scalar_fn_check(
        lambda a: T.sum_all(T.square(T.expand_axes(T.sum_axes(a, (1,), keepdims=True), (2, 5, 4), (1,)))),
        x0,
    )
    scalar_fn_check(lambda a: T.square(T.mean_all(a)), x0)


def test_gradients_matmul_both_sides():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(2, 3, 4))
    b0 = rng.normal(size=(4, 5))

    a, b = leaf(a0), leaf(b0)
    out = T.sum_all(T.square(T.matmul(a, b)))
    ga, gb = grad_value(out, [a, b])

    def fa(v):
        return T.sum_all(T.square(T.matmul(T.Tensor(v), leaf(b0)))).item()

    def fb(v):
        return T.sum_all(T.square(T.matmul(leaf(a0), T.Tensor(v, requires_grad=True)))).item()

    assert rel_err(np.linalg.norm(ga), np.linalg.norm(central_diff_scalar(fa, a0))) < FD_TOL
    np.testing.assert_allclose(ga, central_diff_scalar(fa, a0), rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(gb, central_diff_scalar(fb, b0), rtol=1e-4, atol=1e-7)


def test_gradients_bias_adds():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(2, 3))
    b0 = rng.normal(size=3)
    x, b = leaf(x0), leaf(b0)
    out = T.sum_all(T.square(T.add_bias(x, b)))
    gx, gb = grad_value(out, [x, b])

    def fb(v):
        return T.sum_all(T.square(T.add_bias(leaf(x0), T.Tensor(v)))).item()

    np.testing.assert_allclose(gb, central_diff_scalar(fb, b0), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gx, 2.0 * (x0 + b0), rtol=1e-13)

    x4 = rng.normal(size=(2, 3, 4, 4))
    c0 = rng.normal(size=3)

    def fc(v):
        return T.sum_all(T.square(T.add_channel_bias(leaf(x4), T.Tensor(v)))).item()

    xc, c = leaf(x4), leaf(c0)
    _, gc = grad_value(T.sum_all(T.square(T.add_channel_bias(xc, c))), [xc, c])
    np.testing.assert_allclose(gc, central_diff_scalar(fc, c0), rtol=1e-5, atol=1e-8)


# ---------------------------------------------------------------------------
# convolution gather/scatter


def naive_conv(x, w, k, stride, pad):
    """Loop convolution oracle: x (b,c,h,wd), w (out_c, c, k, k)."""
    b, c, h, wd = x.shape
    out_c = w.shape[0]
    xp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, out_c, oh, ow))
    for bi in range(b):
        for oc in range(out_c):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[bi, oc, i, j] = np.sum(patch * w[oc])
    return out


def conv_via_im2col(x0, w0, k, stride, pad):
    b, c, h, wd = x0.shape
    out_c = w0.shape[0]
    geom = T.conv_geometry(c, h, wd, k, stride, pad)
    cols = T.im2col(T.Tensor(x0), geom)
    w2 = T.Tensor(w0.reshape(out_c, c * k * k).T)
    out = T.matmul(cols, w2)
    return T.transpose(T.reshape(out, (b, geom.oh, geom.ow, out_c)), (0, 3, 1, 2))


@pytest.mark.parametrize("shape,k,stride,pad", [
    ((2, 1, 3, 3), 2, 1, 0),
    ((1, 2, 5, 5), 3, 2, 1),
    ((2, 3, 8, 8), 5, 2, 2),
    ((1, 1, 4, 6), 3, 1, 1),
])
def test_im2col_matmul_matches_loop_convolution(shape, k, stride, pad):
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=shape)
    out_c = 4
    w0 = rng.normal(size=(out_c, shape[1], k, k))
    got = conv_via_im2col(x0, w0, k, stride, pad).value
    want = naive_conv(x0, w0, k, stride, pad)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(2, 2, 5, 5))
    w0 = rng.normal(size=(3, 2, 3, 3))

    def f(v):
        return T.sum_all(T.square(conv_via_im2col(v, w0, 3, 2, 1))).item()

    x = T.Tensor(x0, requires_grad=True)
    geom = T.conv_geometry(2, 5, 5, 3, 2, 1)
    cols = T.im2col(x, geom)
    out = T.matmul(cols, T.Tensor(w0.reshape(3, -1).T))
    (gx,) = grad_value(T.sum_all(T.square(out)), [x])
    np.testing.assert_allclose(gx, central_diff_scalar(f, x0), rtol=1e-4, atol=1e-7)


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10**9))
def test_im2col_col2im_are_adjoint(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    h = int(rng.integers(3, 9))
    w = int(rng.integers(3, 9))
    k = int(rng.integers(1, min(h, w) + 1))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    geom = T.conv_geometry(c, h, w, k, stride, pad)
    x = rng.normal(size=(2, c, h, w))
    y = rng.normal(size=(2, geom.oh * geom.ow, c * k * k))
    lhs = np.sum(_value(T.im2col(T.Tensor(x), geom)) * y)
    rhs = np.sum(x * _value(T.col2im(T.Tensor(y), geom)))
    assert rel_err(lhs, rhs) < 1e-12 or abs(lhs - rhs) < 1e-12


def _value(t):
    return t.value


# ---------------------------------------------------------------------------
# second derivatives through the graph-valued backward pass


def test_grad_of_gradient_norm_matches_finite_differences():
    # d/dW of || d/dx sum(tanh(x @ W)) ||^2, the double-backprop pattern
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(1, 3))
    w0 = rng.normal(size=(3, 4)) * 0.7

    def norm_sq(wv):
        x = T.Tensor(x0, requires_grad=True)
        w = T.Tensor(wv, requires_grad=True)
        out = T.sum_all(T.tanh(T.matmul(x, w)))
        (gx,) = T.grad(out, [x])
        return T.sum_all(T.square(gx))

    s = norm_sq(w0)
    w_node = None
    # rebuild with a handle on w to differentiate a second time
    x = T.Tensor(x0, requires_grad=True)
    w_node = T.Tensor(w0, requires_grad=True)
    out = T.sum_all(T.tanh(T.matmul(x, w_node)))
    (gx,) = T.grad(out, [x])
    s2 = T.sum_all(T.square(gx))
    assert rel_err(s2.item(), s.item()) < 1e-15
    (gw,) = grad_value(s2, [w_node])

    fd = central_diff_scalar(lambda wv: norm_sq(wv).item(), w0)
    np.testing.assert_allclose(gw, fd, rtol=1e-3, atol=1e-6)


def test_second_order_through_leaky_relu_masks():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=(1, 4)) + 0.3  # keep activations off the kink
    w0 = rng.normal(size=(4, 3)) * 0.9

    def norm_sq(wv):
        x = T.Tensor(x0, requires_grad=True)
        w = T.Tensor(wv, requires_grad=True)
        out = T.sum_all(T.leaky_relu(T.matmul(x, w), 0.2))
        (gx,) = T.grad(out, [x])
        return T.sum_all(T.square(gx)), w

    s, w = norm_sq(w0)
    (gw,) = grad_value(s, [w])
    fd = central_diff_scalar(lambda wv: norm_sq(wv)[0].item(), w0)
    np.testing.assert_allclose(gw, fd, rtol=1e-3, atol=1e-6)


# ---------------------------------------------------------------------------
# grad() bookkeeping


def test_grad_independent_leaf_gets_zeros():
    a = leaf([1.0, 2.0])
    b = leaf([3.0, 4.0])
    out = T.sum_all(T.square(a))
    ga, gb = grad_value(out, [a, b])
    np.testing.assert_array_equal(ga, [2.0, 4.0])
    np.testing.assert_array_equal(gb, [0.0, 0.0])


def test_grad_requires_scalar_without_seed():
    a = leaf([1.0, 2.0])
    out = T.square(a)
    with pytest.raises(ValueError):
        T.grad(out, [a])
    seeded = T.grad(out, [a], grad_output=T.Tensor(np.array([1.0, 0.0])))
    np.testing.assert_array_equal(seeded[0].value, [2.0, 0.0])


def test_grad_reused_subexpression_accumulates():
    a = leaf(2.0)
    b = T.square(a)  # 4
    out = T.mul(b, b)  # a^4, d/da = 4 a^3 = 32
    (g,) = grad_value(out, [a])
    assert g == 32.0


def test_grad_is_itself_differentiable():
    a = leaf(3.0)
    out = T.mul(T.square(a), a)  # a^3
    (g1,) = T.grad(out, [a])  # 3 a^2 = 27
    assert g1.value == 27.0
    (g2,) = T.grad(T.sum_all(g1), [a])  # 6 a = 18
    assert g2.value == 18.0


def test_constant_inputs_break_the_graph():
    a = T.Tensor([1.0, 2.0])  # requires_grad False
    out = T.square(a)
    assert not out.requires_grad
    assert out._parents == ()


def test_detach_blocks_gradient_flow():
    a = leaf([1.0, 2.0])
    out = T.sum_all(T.mul(a.detach(), a))  # only the second factor is live
    (g,) = grad_value(out, [a])
    np.testing.assert_array_equal(g, [1.0, 2.0])


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10**9))
def test_forward_backward_deterministic(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 3))
    w0 = rng.normal(size=(3, 2))

    def run():
        x = T.Tensor(x0, requires_grad=True)
        w = T.Tensor(w0, requires_grad=True)
        out = T.sum_all(T.square(T.tanh(T.matmul(x, w))))
        gx, gw = T.grad(out, [x, w])
        return out.item(), gx.value.copy(), gw.value.copy()

    o1, gx1, gw1 = run()
    o2, gx2, gw2 = run()
    assert o1 == o2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)
