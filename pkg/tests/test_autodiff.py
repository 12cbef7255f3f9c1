import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossview.autodiff import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    euclidean_loss,
    fully_connected,
    maxpool2d,
    relu,
    softmax_cross_entropy,
    topological_order,
)

from oracles import conv2d_naive, maxpool_naive, numeric_grad, rel_err

F64 = np.float64


def leaf(a):
    return Tensor(np.array(a, dtype=F64), requires_grad=True)


def grads_vs_numeric(build, tensors, eps=1e-6):
    """Analytic gradients of scalar ``build()`` against central differences."""
    for t in tensors:
        t.grad = None
    build().backward()
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data, eps)
        worst = max(worst, rel_err(t.grad, num))
    return worst


# ---------------------------------------------------------------- conv2d

def test_conv_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 6)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, conv2d_naive(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_gradients_finite_difference():
    rng = np.random.default_rng(1)
    x, w, b = leaf(rng.standard_normal((2, 2, 5, 5))), leaf(rng.standard_normal((3, 2, 3, 3))), leaf(rng.standard_normal(3))
    proj = rng.standard_normal((2, 3, 5, 5))

    def build():
        out = conv2d(x, w, b, stride=1, pad=1)
        return euclidean_loss(out, proj)

    assert grads_vs_numeric(build, [x, w, b]) < 1e-3


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError) as e:
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    assert "(1, 2, 5, 5)" in str(e.value) and "(1, 3, 3, 3)" in str(e.value)
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2)
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))


# ---------------------------------------------------------------- relu / maxpool

def test_relu_definition():
    np.testing.assert_array_equal(relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])


def test_relu_dead_region():
    x = leaf(-np.abs(np.random.default_rng(2).standard_normal(10)) - 0.1)
    out = relu(x)
    assert not out.data.any()
    out.backward(np.ones(10))
    assert not x.grad.any()


def test_relu_gradient_at_zero_is_zero():
    x = leaf([0.0, 1.0])
    relu(x).backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_finite_difference_away_from_kink():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 6))
    a[np.abs(a) < 1e-4] = 0.5
    x = leaf(a)
    w = rng.standard_normal((4, 6))
    assert grads_vs_numeric(lambda: euclidean_loss(relu(x), w), [x]) < 1e-3


def test_relu_margin_case_tight_tolerance():
    rng = np.random.default_rng(4)
    a = rng.uniform(0.1, 1.0, (3, 5)) * rng.choice([-1, 1], (3, 5))
    x = leaf(a)
    assert grads_vs_numeric(lambda: euclidean_loss(relu(x), np.zeros((3, 5))), [x]) < 1e-4


def test_maxpool_definition_and_oracle():
    assert maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4.0
    x = np.random.default_rng(5).standard_normal((2, 3, 6, 4))
    np.testing.assert_array_equal(maxpool2d(Tensor(x)).data, maxpool_naive(x))


def test_maxpool_tie_rule_first_element():
    x = leaf(np.full((1, 1, 4, 4), 2.0))
    out = maxpool2d(x)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.0))
    out.backward(np.ones((1, 1, 2, 2)))
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_finite_difference():
    x = leaf(np.random.default_rng(6).standard_normal((2, 2, 4, 4)))
    w = np.random.default_rng(7).standard_normal((2, 2, 2, 2))
    assert grads_vs_numeric(lambda: euclidean_loss(maxpool2d(x), w), [x]) < 1e-3


def test_maxpool_odd_dims_error():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


# ---------------------------------------------------------------- fully connected / concat

def test_fc_identity_and_bias_only():
    x = np.random.default_rng(8).standard_normal((3, 4))
    np.testing.assert_array_equal(fully_connected(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = np.arange(5.0)
    out = fully_connected(Tensor(x), Tensor(np.zeros((4, 5))), Tensor(b)).data
    np.testing.assert_array_equal(out, np.tile(b, (3, 1)))


def test_fc_finite_difference():
    rng = np.random.default_rng(9)
    x, w, b = leaf(rng.standard_normal((4, 7))), leaf(rng.standard_normal((7, 5))), leaf(rng.standard_normal(5))
    t = rng.standard_normal((4, 5))
    assert grads_vs_numeric(lambda: euclidean_loss(fully_connected(x, w, b), t), [x, w, b]) < 1e-4


def test_fc_shape_mismatch():
    with pytest.raises(ShapeError):
        fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


def test_concat_routes_gradients():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones((2, 2)))
    out = concat([a, b])
    g = np.arange(10.0).reshape(2, 5)
    out.backward(g)
    np.testing.assert_array_equal(a.grad, g[:, :3])
    np.testing.assert_array_equal(b.grad, g[:, 3:])


# ---------------------------------------------------------------- losses

def test_softmax_ce_uniform_and_saturated():
    assert float(softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).data) == pytest.approx(np.log(4), abs=1e-6)
    logits = np.zeros((1, 5))
    logits[0, 2] = 1000.0
    assert float(softmax_cross_entropy(Tensor(logits), [2]).data) == pytest.approx(0.0, abs=1e-6)


def test_softmax_ce_gradient_closed_form_and_numeric():
    rng = np.random.default_rng(10)
    z = leaf(rng.standard_normal((4, 6)))
    labels = rng.integers(0, 6, 4)
    softmax_cross_entropy(z, labels).backward()
    p = np.exp(z.data - z.data.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(4), labels] -= 1
    np.testing.assert_allclose(z.grad, p / 4, rtol=1e-10)
    assert grads_vs_numeric(lambda: softmax_cross_entropy(z, labels), [z]) < 1e-4


def test_softmax_ce_label_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_euclidean_examples():
    t = np.random.default_rng(11).standard_normal((5, 4))
    assert float(euclidean_loss(Tensor(t), t).data) == 0.0
    off = t.copy()
    off[:, 0] += 1
    assert float(euclidean_loss(Tensor(off), t).data) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ShapeError):
        euclidean_loss(Tensor(t), t[:, :3])


def test_euclidean_gradient():
    rng = np.random.default_rng(12)
    p, t = leaf(rng.standard_normal((3, 4))), rng.standard_normal((3, 4))
    euclidean_loss(p, t).backward()
    np.testing.assert_allclose(p.grad, (p.data - t) / 3, rtol=1e-12)
    assert grads_vs_numeric(lambda: euclidean_loss(p, t), [p]) < 1e-5


# ---------------------------------------------------------------- graph

def test_diamond_graph_accumulates_and_orders():
    x = leaf(np.random.default_rng(13).standard_normal((2, 3)))
    w = leaf(np.eye(3))
    b = leaf(np.zeros(3))
    h = fully_connected(x, w, b)
    out = concat([relu(h), h])
    loss = euclidean_loss(out, np.zeros((2, 6)))
    order = topological_order(loss)
    pos = {id(t): k for k, t in enumerate(order)}
    for node in order:
        for p in node.parents:
            assert pos[id(p)] < pos[id(node)]
    assert order[-1] is loss
    loss.backward()
    expected = (x.data * (x.data > 0) + x.data) / 2
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)


def test_reshape_does_not_alias_gradient():
    x = leaf(np.arange(6.0))
    y = x.reshape(2, 3)
    assert y.shape == (2, 3) and x.shape == (6,)
    y.backward(np.ones((2, 3)))
    assert x.grad.shape == (6,)
    assert y.grad is None


def test_float32_preserved():
    x = Tensor(np.ones((1, 1, 4, 4), np.float32))
    w = Tensor(np.ones((2, 1, 3, 3), np.float32))
    out = maxpool2d(relu(conv2d(x, w, Tensor(np.zeros(2, np.float32)), pad=1)))
    assert out.data.dtype == np.float32


def test_forward_is_deterministic():
    rng = np.random.default_rng(14)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    a = conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
    c = conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
    assert a.tobytes() == c.tobytes()


# ---------------------------------------------------------------- properties

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(0, 2), st.integers(1, 2),
       st.integers(0, 2 ** 31))
def test_conv_oracle_property(n, c, k, side, pad, stride, seed):
    if (side + 2 * pad - 3) % stride or side + 2 * pad < 3:
        return
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((n, c, side, side)), rng.standard_normal((k, c, 3, 3)), rng.standard_normal(k)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, conv2d_naive(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2 ** 31))
def test_softmax_ce_nonnegative_and_bounded(n, m, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, m)) * 10
    labels = rng.integers(0, m, n)
    loss = float(softmax_cross_entropy(Tensor(z), labels).data)
    assert loss >= 0
    assert np.isfinite(loss)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 10), st.integers(0, 2 ** 31))
def test_euclidean_scales_quadratically(n, d, scale, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    base = float(euclidean_loss(Tensor(p), t).data)
    scaled = float(euclidean_loss(Tensor(p * scale), t * scale).data)
    assert scaled == pytest.approx(base * scale ** 2, rel=1e-9)
