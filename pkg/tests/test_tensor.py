import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_close, numeric_gradient, weighted_sum_loss
from qsense import tensor as T
from qsense.errors import DimensionError, ValidationError
from qsense.tensor import Tape, Tensor

RNG = np.random.default_rng(1234)


def test_matmul_identity():
    out = T.matmul(None, Tensor([[1, 2], [3, 4]]), Tensor([[1, 0], [0, 1]]))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_dot():
    out = T.matmul(None, Tensor([[1, 2]]), Tensor([[3], [4]]))
    assert out.data.reshape(()) == 11


def test_matmul_against_triple_loop():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    out = T.matmul(None, Tensor(a), Tensor(b))
    assert np.allclose(out.data, want, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        T.matmul(None, Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def naive_conv2d(x, k, stride, pad):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for co in range(cout):
            for ci in range(cin):
                for i in range(oh):
                    for j in range(ow):
                        for di in range(kh):
                            for dj in range(kw):
                                out[b, co, i, j] += (
                                    xp[b, ci, i * stride + di, j * stride + dj] * k[co, ci, di, dj])
    return out


def test_conv2d_scalar_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.full((1, 1, 1, 1), 2.0))
    out = T.conv2d(None, x, k, 1, 0)
    assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_full_cover_kernel():
    x = RNG.normal(size=(1, 1, 3, 3))
    k = RNG.normal(size=(1, 1, 3, 3))
    out = T.conv2d(None, Tensor(x), Tensor(k), 1, 0)
    assert out.shape == (1, 1, 1, 1)
    assert np.allclose(out.data.reshape(()), (x * k).sum(), atol=1e-12)


def test_conv2d_against_naive_loops():
    x = RNG.normal(size=(2, 3, 8, 8))
    k = RNG.normal(size=(4, 3, 3, 3))
    out = T.conv2d(None, Tensor(x), Tensor(k), 2, 1)
    assert np.allclose(out.data, naive_conv2d(x, k, 2, 1), atol=1e-12)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(None, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 5, 5))), 1, 0)


def test_relu_and_clamp_examples():
    assert np.array_equal(T.relu(None, Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert np.array_equal(T.clamp(None, Tensor([-3.0, 0.5, 9.0]), 0, 1).data, [0, 0.5, 1])


def test_relu_backward_subgradient_zero():
    tape = Tape()
    x = Tensor([-1.0, 0.0, 2.0])
    loss = T.sum_all(tape, T.relu(tape, x))
    g = tape.backward(loss)[x].data
    assert np.array_equal(g, [0, 0, 1])


def test_binary_shape_mismatch():
    for op in (T.add, T.sub, T.mul, T.div):
        with pytest.raises(DimensionError):
            op(None, Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_pool_examples():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert T.pool2d(None, x, "max", 2).data.reshape(()) == 4
    assert T.pool2d(None, x, "avg", 2).data.reshape(()) == 2.5


def naive_pool(x, kind, window, stride):
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    win = x[b, ch, i * stride : i * stride + window, j * stride : j * stride + window]
                    out[b, ch, i, j] = win.max() if kind == "max" else win.mean()
    return out


def test_pool_against_naive():
    x = RNG.normal(size=(1, 2, 6, 6))
    for kind in ("max", "avg"):
        got = T.pool2d(None, Tensor(x), kind, 2, 2).data
        assert np.allclose(got, naive_pool(x, kind, 2, 2), atol=1e-12)


def test_pool_window_too_large():
    with pytest.raises(DimensionError):
        T.pool2d(None, Tensor(np.ones((1, 1, 2, 2))), "max", 3)


def test_maxpool_tie_routes_to_first():
    tape = Tape()
    x = Tensor(np.array([[5.0, 5.0], [1.0, 0.0]]).reshape(1, 1, 2, 2))
    loss = T.sum_all(tape, T.pool2d(tape, x, "max", 2))
    g = tape.backward(loss)[x].data.reshape(2, 2)
    assert np.array_equal(g, [[1, 0], [0, 0]])


def test_softmax_crossentropy_uniform():
    loss = T.softmax_crossentropy(None, Tensor([[0.0, 0.0]]), Tensor([[0.5, 0.5]]))
    assert abs(loss.item() - np.log(2)) < 1e-12


def test_softmax_crossentropy_saturated_stable():
    loss = T.softmax_crossentropy(None, Tensor([[1000.0, 0.0]]), Tensor([[1.0, 0.0]]))
    assert loss.item() == 0.0


def test_softmax_crossentropy_high_precision_oracle():
    from mpmath import mp, mpf, exp as mexp, log as mlog

    mp.prec = 120
    logits = RNG.normal(size=(4, 5)) * 3
    targets = RNG.random((4, 5))
    targets /= targets.sum(axis=1, keepdims=True)
    total = mpf(0)
    for i in range(4):
        denom = sum(mexp(mpf(v)) for v in logits[i])
        for j in range(5):
            total -= mpf(targets[i, j]) * (mpf(logits[i, j]) - mlog(denom))
    want = float(total / 4)
    got = T.softmax_crossentropy(None, Tensor(logits), Tensor(targets)).item()
    assert abs(got - want) < 1e-12


def test_softmax_crossentropy_rejects_bad_targets():
    with pytest.raises(ValidationError):
        T.softmax_crossentropy(None, Tensor([[0.0, 0.0]]), Tensor([[0.7, 0.7]]))
    with pytest.raises(ValidationError):
        T.softmax_crossentropy(None, Tensor([[0.0, 0.0]]), Tensor([[1.5, -0.5]]))


@settings(max_examples=30, deadline=None, derandomize=True)
@given(st.integers(1, 6), st.integers(2, 7))
def test_softmax_rows_sum_to_one(n, c):
    z = np.random.default_rng(n * 10 + c).normal(size=(n, c)) * 50
    p = T.softmax(None, Tensor(z)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-12)


def test_euclidean_loss_examples():
    a = Tensor([3.0, 0.0])
    assert T.euclidean_loss(None, a, a).item() == 0.0
    assert abs(T.euclidean_loss(None, a, Tensor([0.0, 4.0])).item() - 5.0) < 1e-12
    x = RNG.normal(size=(3, 7))
    y = RNG.normal(size=(3, 7))
    want = np.mean([np.sqrt(((x[i] - y[i]) ** 2).sum()) for i in range(3)])
    assert abs(T.euclidean_loss(None, Tensor(x), Tensor(y)).item() - want) < 1e-12


def test_euclidean_loss_zero_distance_gradient_is_zero():
    tape = Tape()
    a = Tensor(RNG.normal(size=(2, 3)))
    loss = T.euclidean_loss(tape, a, Tensor(a.data.copy()))
    g = tape.backward(loss)[a].data
    assert np.all(g == 0) and np.all(np.isfinite(g))


# ---------------------------------------------------------------------------
# backward machinery


def test_backward_sum_gives_ones():
    tape = Tape()
    x = Tensor(RNG.normal(size=(2, 3, 2)))
    g = tape.backward(T.sum_all(tape, x))[x].data
    assert np.array_equal(g, np.ones((2, 3, 2)))


def test_backward_square_at_three():
    tape = Tape()
    x = Tensor(np.array(3.0))
    g = tape.backward(T.mul(tape, x, x))[x].data
    assert g.reshape(()) == 6.0


def test_backward_requires_scalar_on_tape():
    tape = Tape()
    x = Tensor([1.0, 2.0])
    y = T.mul_scalar(tape, x, 2.0)
    with pytest.raises(ValidationError):
        tape.backward(y)
    with pytest.raises(ValidationError):
        tape.backward(Tensor(np.array(1.0)))


def test_backward_unreachable_tensors_get_zeros():
    tape = Tape()
    x = Tensor([1.0, 2.0])
    y = Tensor([3.0, 4.0])
    loss = T.sum_all(tape, x)
    T.mul_scalar(tape, y, 2.0)  # recorded but not feeding the loss
    grads = tape.backward(loss)
    assert np.array_equal(grads[y].data, [0, 0])


def test_backward_is_linear():
    tape = Tape()
    x = Tensor(RNG.normal(size=(4,)))
    l1 = T.sum_all(tape, T.mul(tape, x, x))
    l2 = T.sum_all(tape, T.relu(tape, x))
    alpha, beta = 0.7, -2.5
    combo = T.add(tape, T.mul_scalar(tape, l1, alpha), T.mul_scalar(tape, l2, beta))
    g_combo = tape.backward(combo)[x].data
    g1 = tape.backward(l1)[x].data
    g2 = tape.backward(l2)[x].data
    assert np.all(np.abs(g_combo - (alpha * g1 + beta * g2)) < 1e-10)


def test_backward_deterministic_bitwise():
    tape = Tape()
    x = Tensor(RNG.normal(size=(3, 3)))
    w = Tensor(RNG.normal(size=(3, 3)))
    loss = T.euclidean_loss(tape, T.matmul(tape, x, w), Tensor(RNG.normal(size=(3, 3))))
    g1 = tape.backward(loss)[w].data
    g2 = tape.backward(loss)[w].data
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# gradcheck of every primitive against central finite differences


def _check_unary(op, x, **kw):
    w = RNG.normal(size=op(None, Tensor(x), **kw).shape)
    tape = Tape()
    xt = Tensor(x)
    loss = weighted_sum_loss(tape, op(tape, xt, **kw), w)
    analytic = tape.backward(loss)[xt].data
    numeric = numeric_gradient(
        lambda a: weighted_sum_loss(None, op(None, Tensor(a), **kw), w).item(), x)
    assert_grad_close(analytic, numeric)


def _check_binary(op, a, b, **kw):
    w = RNG.normal(size=op(None, Tensor(a), Tensor(b), **kw).shape)
    tape = Tape()
    at, bt = Tensor(a), Tensor(b)
    loss = weighted_sum_loss(tape, op(tape, at, bt, **kw), w)
    grads = tape.backward(loss)
    ga, gb = grads[at].data, grads[bt].data
    na = numeric_gradient(
        lambda v: weighted_sum_loss(None, op(None, Tensor(v), Tensor(b), **kw), w).item(), a)
    nb = numeric_gradient(
        lambda v: weighted_sum_loss(None, op(None, Tensor(a), Tensor(v), **kw), w).item(), b)
    assert_grad_close(ga, na)
    assert_grad_close(gb, nb)


def _away_from(x, kinks, margin=1e-3):
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, x + ridge_sign(x) * 2 * margin, x)
    return x


def ridge_sign(x):
    s = np.sign(x)
    return np.where(s == 0, 1.0, s)


def test_gradcheck_elementwise_ops():
    x = RNG.uniform(-2, 2, size=(3, 4))
    y = RNG.uniform(-2, 2, size=(3, 4)) + 3.0  # keep div well conditioned
    _check_binary(T.add, x, y)
    _check_binary(T.sub, x, y)
    _check_binary(T.mul, x, y)
    _check_binary(T.div, x, y)
    _check_unary(lambda t, a: T.mul_scalar(t, a, -1.7), x)
    _check_unary(lambda t, a: T.add_scalar(t, a, 0.3), x)
    _check_unary(T.exp, x)
    _check_unary(T.log, np.abs(x) + 0.5)
    _check_unary(T.sqrt, np.abs(x) + 0.5)
    _check_unary(T.relu, _away_from(x, [0.0]))
    _check_unary(lambda t, a: T.clamp(t, a, -1.0, 1.0), _away_from(x, [-1.0, 1.0]))


def test_gradcheck_linear_and_shape_ops():
    _check_binary(T.matmul, RNG.uniform(-2, 2, (3, 4)), RNG.uniform(-2, 2, (4, 2)))
    _check_unary(T.transpose, RNG.uniform(-2, 2, (3, 4)))
    _check_unary(lambda t, a: T.reshape(t, a, (2, 6)), RNG.uniform(-2, 2, (3, 4)))
    _check_unary(T.sum_all, RNG.uniform(-2, 2, (3, 4)))
    _check_unary(T.row_sum, RNG.uniform(-2, 2, (3, 4)))
    _check_unary(lambda t, a: T.broadcast_cols(t, a, 5), RNG.uniform(-2, 2, (3, 1)))
    _check_unary(T.sum_to_channel, RNG.uniform(-2, 2, (2, 3, 2, 2)))
    _check_unary(lambda t, a: T.channel_broadcast(t, a, (2, 3, 2, 2)), RNG.uniform(-2, 2, (3,)))


def test_gradcheck_conv_and_pool():
    _check_binary(lambda t, a, b: T.conv2d(t, a, b, 2, 1),
                  RNG.uniform(-2, 2, (2, 2, 5, 5)), RNG.uniform(-2, 2, (3, 2, 3, 3)))
    x = RNG.uniform(-2, 2, (1, 2, 4, 4))
    _check_unary(lambda t, a: T.pool2d(t, a, "avg", 2, 2), x)
    _check_unary(lambda t, a: T.pool2d(t, a, "max", 2, 2), x)


def test_gradcheck_losses():
    logits = RNG.uniform(-2, 2, (3, 5))
    targets = RNG.random((3, 5))
    targets /= targets.sum(axis=1, keepdims=True)
    tape = Tape()
    lt = Tensor(logits)
    loss = T.softmax_crossentropy(tape, lt, Tensor(targets))
    analytic = tape.backward(loss)[lt].data
    numeric = numeric_gradient(
        lambda z: T.softmax_crossentropy(None, Tensor(z), Tensor(targets)).item(), logits)
    assert_grad_close(analytic, numeric)

    a = RNG.uniform(-2, 2, (3, 4))
    b = RNG.uniform(-2, 2, (3, 4))
    tape = Tape()
    at = Tensor(a)
    loss = T.euclidean_loss(tape, at, Tensor(b))
    analytic = tape.backward(loss)[at].data
    numeric = numeric_gradient(
        lambda v: T.euclidean_loss(None, Tensor(v), Tensor(b)).item(), a)
    assert_grad_close(analytic, numeric)


def test_double_backward_hessian_of_quartic():
    # L = sum(x^2 * x^2): H = diag(12 x^2)
    x0 = RNG.uniform(0.5, 1.5, size=(4,))
    tape = Tape()
    x = Tensor(x0)
    x2 = T.mul(tape, x, x)
    loss = T.sum_all(tape, T.mul(tape, x2, x2))
    g = tape.backward(loss, create_graph=True)[x]
    v = np.array([1.0, -1.0, 2.0, 0.5])
    s = T.sum_all(tape, T.mul(tape, g, Tensor(v)))
    hv = tape.backward(s)[x].data
    assert np.allclose(hv, 12 * x0**2 * v, atol=1e-10)
