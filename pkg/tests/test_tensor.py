import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hyperecg import tensor as T
from hyperecg.errors import ShapeMismatch
from hyperecg.tensor import Tensor

from oracles import conv1d_naive, fd_gradient

REL_TOL = 1e-5


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_grads(op, inputs, rng, tol=REL_TOL):
    """Compare tape gradients of sum(op(*inputs) * R) with central differences."""
    probe = None

    def scalar(*arrays):
        nonlocal probe
        with T.no_grad():
            out = op(*[Tensor(a) for a in arrays]).data
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return float(np.sum(out * probe))

    scalar(*inputs)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    out = op(*tensors)
    loss = _weighted_sum(out, probe)
    T.backward(loss)
    for i, t in enumerate(tensors):
        def f(a, i=i):
            args = [x.copy() for x in inputs]
            args[i] = a
            return scalar(*args)
        num = fd_gradient(f, inputs[i])
        err = rel_err(t.grad, num)
        assert err.max() < tol, f"input {i}: max rel err {err.max():.2e}"


def _weighted_sum(out, probe):
    # sum(out * probe) through differentiable ops only
    flat = T.reshape(out, (1, out.data.size))
    return T.sum_all(T.dense(flat, Tensor(probe.reshape(1, -1))))


# ------------------------------------------------------------------ conv1d


def test_conv1d_unit_kernel_is_identity():
    x = Tensor(np.arange(1.0, 6.0).reshape(1, 1, 5))
    out = T.conv1d(x, Tensor(np.ones((1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv1d_impulse_reveals_kernel():
    a, b, c = 2.0, 3.0, 5.0
    x = Tensor(np.array([1.0, 0, 0, 0]).reshape(1, 1, 4))
    out = T.conv1d(x, Tensor(np.array([a, b, c]).reshape(1, 1, 3)), padding=1)
    # cross-correlation: out[t] = a*x[t-1] + b*x[t] + c*x[t+1]
    np.testing.assert_array_equal(out.data.ravel(), [b, a, 0, 0])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 3), (2, 1), (3, 2)])
def test_conv1d_matches_naive_loops(rng, stride, padding):
    x = rng.standard_normal((2, 3, 17))
    k = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    ours = T.conv1d(Tensor(x), Tensor(k), Tensor(b), stride, padding).data
    np.testing.assert_allclose(ours, conv1d_naive(x, k, b, stride, padding), rtol=0, atol=1e-12)


def test_conv1d_output_width():
    out = T.conv1d(Tensor(np.zeros((1, 2, 20))), Tensor(np.zeros((3, 2, 4))), stride=3, padding=2)
    assert out.shape == (1, 3, (20 + 4 - 4) // 3 + 1)


@pytest.mark.parametrize("stride,padding", [(1, 3), (2, 1)])
def test_conv1d_gradients(rng, stride, padding):
    x = rng.standard_normal((2, 3, 12))
    k = rng.standard_normal((2, 3, 7))
    b = rng.standard_normal(2)
    check_grads(lambda x, k, b: T.conv1d(x, k, b, stride, padding), [x, k, b], rng)


def test_conv1d_shape_errors():
    with pytest.raises(ShapeMismatch):
        T.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 3, 3))))
    with pytest.raises(ShapeMismatch):
        T.conv1d(Tensor(np.zeros((1, 1, 3))), Tensor(np.zeros((1, 1, 5))))
    with pytest.raises(ShapeMismatch):
        T.conv1d(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((1, 1, 3))), stride=0)


# ------------------------------------------------------------------ dense


def test_dense_identity_and_constant():
    x = np.arange(6.0).reshape(2, 3)
    out = T.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)
    out = T.dense(Tensor(x), Tensor(np.zeros((1, 3))), Tensor(np.array([2.5])))
    np.testing.assert_array_equal(out.data, [[2.5], [2.5]])


def test_dense_gradients(rng):
    check_grads(T.dense, [rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)], rng)


def test_dense_shape_error():
    with pytest.raises(ShapeMismatch):
        T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# ------------------------------------------------------------------ elementwise


def test_activation_spot_values():
    assert T.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-3.0, 2.0]))).data, [0.0, 2.0])


@given(arrays(np.float64, 20, elements=st.floats(-30, 30)))
def test_sigmoid_open_interval(x):
    s = T.sigmoid(Tensor(x)).data
    assert np.all((s > 0) & (s < 1))


def test_sigmoid_relu_gradients(rng):
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the ReLU kink
    check_grads(T.sigmoid, [x], rng)
    check_grads(T.relu, [x], rng)


# ------------------------------------------------------------------ pooling


def test_pool_spot_values():
    x = Tensor(np.array([1.0, 3.0, 2.0, 4.0]).reshape(1, 1, 4))
    np.testing.assert_array_equal(T.maxpool1d(x, 2, 2).data.ravel(), [3, 4])
    np.testing.assert_array_equal(T.avgpool1d(x, 2, 2).data.ravel(), [2, 3])


def test_maxpool_tie_routes_to_first_index():
    x = Tensor(np.array([2.0, 2.0, 1.0, 1.0]).reshape(1, 1, 4), requires_grad=True)
    T.backward(T.sum_all(T.maxpool1d(x, 2, 2)))
    np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 1, 0])
    x = Tensor(np.array([2.0, 2.0, 2.0]).reshape(1, 1, 3), requires_grad=True)
    T.backward(T.sum_all(T.maxpool1d(x, 3, 1)))
    np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 0])


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (3, 2)])
def test_pool_gradients(rng, window, stride):
    x = rng.standard_normal((2, 3, 11))
    check_grads(lambda t: T.maxpool1d(t, window, stride), [x], rng)
    check_grads(lambda t: T.avgpool1d(t, window, stride), [x], rng)


def test_maxpool_fast_path_matches_general(rng):
    x = rng.standard_normal((2, 3, 9))
    fast = T.maxpool1d(Tensor(x), 2, 2).data
    np.testing.assert_array_equal(fast, x[:, :, :8].reshape(2, 3, 4, 2).max(axis=-1))


def test_global_pools():
    x = Tensor(np.array([[[1.0, 5.0, 2.0], [7.0, 7.0, 7.0]]]))
    np.testing.assert_array_equal(T.global_maxpool_w(x).data, [[5.0, 7.0]])
    np.testing.assert_array_equal(T.global_avgpool_w(x).data, [[8.0 / 3, 7.0]])


def test_channel_pools():
    x = Tensor(np.array([[[1.0, 3.0], [3.0, 1.0]]]))
    np.testing.assert_array_equal(T.channel_avg(x).data, [[[2.0, 2.0]]])
    np.testing.assert_array_equal(T.channel_max(x).data, [[[3.0, 3.0]]])
    one = Tensor(np.array([[[4.0, -1.0, 2.0]]]))
    np.testing.assert_array_equal(T.channel_avg(one).data, one.data)
    np.testing.assert_array_equal(T.channel_max(one).data, one.data)


@pytest.mark.parametrize("op", [T.global_avgpool_w, T.global_maxpool_w, T.channel_avg, T.channel_max])
def test_reduction_gradients(rng, op):
    check_grads(op, [rng.standard_normal((2, 4, 9))], rng)


# ------------------------------------------------------------------ combinators


def test_concat_and_mul_broadcast():
    a = Tensor(np.ones((2, 1, 5)))
    b = Tensor(np.zeros((2, 1, 5)))
    assert T.concat_channels(a, b).shape == (2, 2, 5)
    x = Tensor(np.arange(30.0).reshape(2, 3, 5))
    np.testing.assert_array_equal(T.mul_broadcast(x, Tensor(np.ones((2, 3)))).data, x.data)
    np.testing.assert_array_equal(T.mul_broadcast(x, Tensor(np.ones((2, 1, 5)))).data, x.data)


def test_mul_broadcast_rejects_other_shapes():
    x = Tensor(np.zeros((2, 3, 5)))
    for shape in [(2, 3, 5), (3,), (2, 5), (1, 1, 5), (2, 3, 1)]:
        with pytest.raises(ShapeMismatch):
            T.mul_broadcast(x, Tensor(np.zeros(shape)))


def test_add_rejects_broadcast():
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))


def test_combinator_gradients(rng):
    x = rng.standard_normal((2, 3, 6))
    check_grads(T.mul_broadcast, [x, rng.standard_normal((2, 3))], rng)
    check_grads(T.mul_broadcast, [x, rng.standard_normal((2, 1, 6))], rng)
    check_grads(lambda a, b: T.concat_channels(a, b), [x, rng.standard_normal((2, 1, 6))], rng)
    check_grads(T.add, [x, rng.standard_normal((2, 3, 6))], rng)
    check_grads(lambda a: T.scale(a, -1.7), [x], rng)


# ------------------------------------------------------------------ loss


@pytest.mark.parametrize("y,p,expected", [
    (1, 0.5, math.log(2)),
    (0, 0.9, -math.log(0.1)),
    (1, 1.0, 0.0),
    (0, 0.0, 0.0),
])
def test_bce_spot_values(y, p, expected):
    loss = T.bce_loss(Tensor(np.array([p])), [y])
    assert abs(float(loss.data) - expected) < 1e-9


def test_bce_is_batch_mean():
    p = np.array([0.2, 0.7, 0.9])
    y = np.array([0, 1, 1])
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(float(T.bce_loss(Tensor(p), y).data) - expected) < 1e-15


def test_bce_gradient(rng):
    p = rng.uniform(0.05, 0.95, size=6)
    y = rng.integers(0, 2, size=6).astype(float)
    t = Tensor(p, requires_grad=True)
    T.backward(T.bce_loss(t, y))
    num = fd_gradient(lambda a: float(T.bce_loss(Tensor(a), y).data), p)
    assert rel_err(t.grad, num).max() < REL_TOL


# ------------------------------------------------------------------ tape


def test_backward_accumulates_and_clears_tape(rng):
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((4, 3)))
    T.backward(T.sum_all(T.dense(x, w)))
    assert len(T.get_tape()) == 0
    g1 = w.grad.copy()
    T.backward(T.sum_all(T.sigmoid(T.dense(x, w))))
    g_both = w.grad.copy()

    w.zero_grad()
    T.backward(T.sum_all(T.sigmoid(T.dense(x, w))))
    np.testing.assert_allclose(g_both, g1 + w.grad, rtol=1e-14)

    w.zero_grad()
    loss = T.add(T.sum_all(T.dense(x, w)), T.sum_all(T.sigmoid(T.dense(x, w))))
    T.backward(loss)
    np.testing.assert_allclose(w.grad, g_both, rtol=1e-13)


def test_no_grad_records_nothing(rng):
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    with T.no_grad():
        out = T.dense(Tensor(np.ones((1, 3))), w)
    assert not out.requires_grad and len(T.get_tape()) == 0


def test_ops_are_deterministic(rng):
    x = rng.standard_normal((3, 2, 15))
    k = rng.standard_normal((4, 2, 7))

    def run():
        kt = Tensor(k, requires_grad=True)
        out = T.maxpool1d(T.relu(T.conv1d(Tensor(x), kt, padding=3)))
        T.backward(T.sum_all(out))
        return out.data.copy(), kt.grad.copy()

    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 4), w=st.integers(1, 12), k=st.integers(1, 9),
       pad=st.integers(0, 4), stride=st.integers(1, 3))
def test_conv1d_shape_algebra_is_total(n, c, w, k, pad, stride):
    x, kern = Tensor(np.zeros((n, c, w))), Tensor(np.zeros((2, c, k)))
    if k > w + 2 * pad:
        with pytest.raises(ShapeMismatch):
            T.conv1d(x, kern, stride=stride, padding=pad)
    else:
        assert T.conv1d(x, kern, stride=stride, padding=pad).shape == (n, 2, (w + 2 * pad - k) // stride + 1)
