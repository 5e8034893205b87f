import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from padistill import autodiff as ad
from padistill.autodiff import Tensor, grad

from oracles import numeric_grad, rel_err


def check_op(fn, *arrays, tol=1e-5):
    """Compare autodiff gradients of ``sum(w * fn(...))`` to finite differences."""
    rng = np.random.default_rng(len(arrays))
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    w = rng.normal(size=out_shape)

    def scalar(*xs):
        return float(np.sum(w * fn(*[Tensor(x) for x in xs]).data))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = ad.sum_(ad.mul(fn(*leaves), Tensor(w)))
    grads = grad(loss, leaves)
    for i, a in enumerate(arrays):
        def fi(x, i=i):
            xs = list(arrays)
            xs[i] = x
            return scalar(*xs)
        assert rel_err(grads[i].data, numeric_grad(fi, a)) <= tol


UNARY = {
    "neg": ad.neg, "square": ad.square, "exp": ad.exp, "relu": ad.relu,
    "sqrt": lambda a: ad.sqrt(ad.add(ad.square(a), 1.0)),
    "log": lambda a: ad.log(ad.add(ad.square(a), 0.5)),
    "sum_axis0": lambda a: ad.sum_(a, axis=0),
    "mean_axis1_keep": lambda a: ad.mean(a, axis=1, keepdims=True),
    "transpose": ad.transpose,
    "reshape": lambda a: ad.reshape(a, (-1,)),
    "getitem": lambda a: a[1:, ::2],
    "fancy_index": lambda a: a[np.array([0, 2, 2])],
    "log_softmax": ad.log_softmax,
    "softmax": ad.softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.normal(size=(3, 4))
        if name == "relu":
            x = x + np.sign(x) * 0.1  # keep away from the kink
        check_op(UNARY[name], x)


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div, ad.matmul])
def test_binary_gradients(op):
    rng = np.random.default_rng(2)
    for _ in range(5):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2)) if op is ad.matmul else rng.normal(size=(3, 4))
        if op is ad.div:
            b = np.abs(b) + 0.5
        check_op(op, a, b)


def test_scalar_broadcast_and_sum_to():
    rng = np.random.default_rng(3)
    check_op(lambda a, s: ad.mul(a, s), rng.normal(size=(2, 3)), np.array(1.7))
    check_op(lambda b: ad.broadcast_to(b, (4, 3)), rng.normal(size=(1, 3)))
    check_op(lambda g: ad.sum_to(g, (1, 3)), rng.normal(size=(4, 3)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_and_pool_gradients(stride):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    check_op(lambda x, w: ad.conv2d(x, w, stride), x, w)
    check_op(lambda x: ad.avgpool2d(x, 2), x)


def test_im2col_col2im_adjoint():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 5, 5))
    cols = ad.im2col(Tensor(x), 1).data
    y = rng.normal(size=cols.shape)
    back = ad.col2im(Tensor(y), x.shape, 1).data
    assert np.isclose(np.sum(cols * y), np.sum(x * back), rtol=1e-12)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                want[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_cross_entropy_soft_targets_gradient():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(4, 3))
    t = rng.dirichlet(np.ones(3), size=4)
    check_op(lambda z: ad.softmax_cross_entropy(z, Tensor(t)), logits)
    # targets leave the simplex under finite differences; use the closed form
    tt = Tensor(t, requires_grad=True)
    (gt,) = grad(ad.softmax_cross_entropy(Tensor(logits), tt), [tt])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(gt.data, -logp / 4, rtol=1e-12)


def test_nested_cube():
    x = Tensor(2.0, requires_grad=True)
    y = ad.mul(ad.mul(x, x), x)
    (g,) = grad(y, [x], create_graph=True)
    (gg,) = grad(g, [x])
    assert g.item() == pytest.approx(12.0, abs=1e-9)
    assert gg.item() == pytest.approx(12.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2))
def test_nested_polynomial_identity(x0, a, b):
    # f = a x^4 + b x^2; f'' = 12 a x^2 + 2 b
    x = Tensor(x0, requires_grad=True)
    x2 = ad.square(x)
    f = ad.add(ad.mul(a, ad.square(x2)), ad.mul(b, x2))
    (g,) = grad(f, [x], create_graph=True)
    (gg,) = grad(g, [x])
    assert abs(gg.item() - (12 * a * x0 ** 2 + 2 * b)) <= 1e-9 * max(1.0, abs(gg.item()))


def test_nested_grad_through_matmul_matches_fd():
    rng = np.random.default_rng(8)
    W = rng.normal(size=(3, 2))
    x0 = rng.normal(size=(4, 3))

    def inner_norm(xv):
        x = Tensor(xv, requires_grad=True)
        w = Tensor(W, requires_grad=True)
        loss = ad.sum_(ad.exp(ad.mul(ad.matmul(x, w), 0.3)))
        (gw,) = grad(loss, [w], create_graph=True)
        return ad.sum_(ad.square(gw)), x

    out, x = inner_norm(x0)
    (gx,) = grad(out, [x])
    fd = numeric_grad(lambda v: inner_norm(v)[0].item(), x0)
    assert rel_err(gx.data, fd) <= 1e-3


def test_unused_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    gx, gy = grad(ad.sum_(x), [x, y])
    np.testing.assert_array_equal(gx.data, np.ones(3))
    np.testing.assert_array_equal(gy.data, np.zeros(2))


def test_reused_node_accumulates():
    x = Tensor(3.0, requires_grad=True)
    y = ad.add(ad.mul(x, x), x)
    assert grad(y, [x])[0].item() == pytest.approx(7.0)


def test_errors_name_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(3, 2\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError, match="inner"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match="single-element"):
        grad(Tensor(np.ones(3), requires_grad=True) * 2, [])
    with pytest.raises(ValueError):
        ad.avgpool2d(Tensor(np.ones((1, 1, 5, 5))), 2)
    with pytest.raises(ValueError, match="probability"):
        ad.softmax_cross_entropy(Tensor(np.zeros((1, 2))), Tensor(np.array([[0.7, 0.7]])))


def test_first_order_grad_is_detached():
    x = Tensor(1.5, requires_grad=True)
    (g,) = grad(ad.square(x), [x])
    assert not g.requires_grad
