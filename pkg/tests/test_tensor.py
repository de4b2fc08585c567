import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ntt import tensor as T
from ntt.tensor import ParamStore, Tensor, backprop, finite_diff_check, relative_error, reverse_gradient

finite = st.floats(-3, 3, allow_nan=False, width=64)


def grad_of(f, *arrays_):
    ts = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays_]
    grads = backprop(f(*ts))
    return [grads.get(t) for t in ts]


def numeric_grad(f, x, eps=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += eps
        down[i] -= eps
        g[i] = (f(up) - f(down)) / (2 * eps)
    return g


def test_add_elementwise():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_add_rejects_implicit_broadcast():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


@given(arrays(np.float64, 3, elements=finite))
def test_matmul_identity(x):
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_sigmoid_at_zero():
    np.testing.assert_array_equal(T.sigmoid(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_grad_of_square_sum():
    (g,) = grad_of(lambda w: T.sum(w * w), [1.0, 2.0])
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_grad_of_matmul_is_outer_product():
    x = np.array([1.0, -2.0, 0.5])
    W = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    g = backprop(T.sum(T.matmul(W, Tensor(x))))[W]
    np.testing.assert_allclose(g, np.outer(np.ones(4), x))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sigmoid_stays_open_when_saturated(dtype):
    y = T.sigmoid(Tensor(np.array([-1e4, -800.0, 0.0, 40.0, 1e4], dtype))).data
    assert (y > 0).all() and (y < 1).all()
    # cascading three saturated gates stays below 3
    assert (y[-1] + (y[-1] + y[-1]) < 3).all()


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.softmax(Tensor(np.array([[0.0, np.nan]])))


def test_sigmoid_local_grad_quarter():
    (g,) = grad_of(lambda z: T.sum(T.sigmoid(z)), [0.0])
    assert g[0] == 0.25


def test_shared_subexpression_accumulates():
    # y = x*x used twice: d/dx (y + y) = 4x
    (g,) = grad_of(lambda x: T.sum((lambda y: y + y)(x * x)), [3.0])
    assert g[0] == 12.0


@pytest.mark.parametrize("shape_a,shape_b", [((3,), (3,)), ((2, 3), (3,)), ((3,), (3, 4)), ((2, 3), (3, 4)),
                                              ((5, 2, 3), (3, 4)), ((5, 2, 3), (3,))])
def test_matmul_grads_match_finite_differences(shape_a, shape_b):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
    w = rng.normal(size=np.shape(a @ b))
    ga, gb = grad_of(lambda x, y: T.sum(T.matmul(x, y) * Tensor(w)), a, b)
    np.testing.assert_allclose(ga, numeric_grad(lambda z: np.sum((z @ b) * w), a), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, numeric_grad(lambda z: np.sum((a @ z) * w), b), rtol=1e-6, atol=1e-8)


UNARY = {
    "tanh": (T.tanh, np.tanh),
    "sigmoid": (T.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "exp": (T.exp, np.exp),
    "relu": (T.relu, lambda x: np.maximum(x, 0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=25, deadline=None)
@given(x=arrays(np.float64, (2, 3), elements=st.floats(-2, 2, allow_nan=False).filter(lambda v: abs(v) > 1e-3)))
def test_unary_grads(name, x):
    op, ref = UNARY[name]
    w = np.arange(1, 7, dtype=float).reshape(2, 3)
    (g,) = grad_of(lambda t: T.sum(op(t) * Tensor(w)), x)
    np.testing.assert_allclose(g, numeric_grad(lambda z: np.sum(ref(z) * w), x), rtol=1e-5, atol=1e-7)


def test_log_grad():
    x = np.array([0.5, 2.0, 3.0])
    (g,) = grad_of(lambda t: T.sum(T.log(t)), x)
    np.testing.assert_allclose(g, 1 / x)


def test_relu_subgradient_at_zero_is_zero():
    (g,) = grad_of(lambda t: T.sum(T.relu(t)), [-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_concat_split_getitem_reshape_expand_grads():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    w = rng.normal(size=(4, 2, 5))

    def f(x, y):
        z = T.concat([x, y], axis=-1)  # (2, 5)
        p, q = T.split(z, [1, 4])
        z2 = T.concat([q, p], axis=-1)
        return T.sum(T.expand(z2, 0, 4) * Tensor(w)) + T.sum(T.reshape(z, (10,))[3:7] * Tensor(np.ones(4)))

    ga, gb = grad_of(f, a, b)

    def ref(x, y):
        z = np.concatenate([x, y], -1)
        z2 = np.concatenate([z[:, 1:], z[:, :1]], -1)
        return np.sum(z2[None] * w) + np.sum(z.reshape(10)[3:7])

    np.testing.assert_allclose(ga, numeric_grad(lambda z: ref(z, b), a), rtol=1e-6)
    np.testing.assert_allclose(gb, numeric_grad(lambda z: ref(a, z), b), rtol=1e-6)


def test_gather_rows_accumulates_repeats():
    table = Tensor(np.eye(4), requires_grad=True)
    rows = T.gather_rows(table, np.array([2, 2, 0]))
    np.testing.assert_array_equal(rows.data[0], [0, 0, 1, 0])
    g = backprop(T.sum(rows))[table]
    np.testing.assert_array_equal(g[:, 0], [1, 0, 2, 0])


def test_pick_selects_per_row():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    y = T.pick(x, np.array([2, 0]))
    np.testing.assert_array_equal(y.data, [2.0, 3.0])
    np.testing.assert_array_equal(backprop(T.sum(y))[x], [[0, 0, 1], [1, 0, 0]])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), p, atol=1e-12)


def test_masked_softmax_zero_and_gradient_free():
    x = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
    mask = np.array([[True, False, True]])
    p = T.softmax(x, mask)
    assert p.data[0, 1] == 0.0
    np.testing.assert_allclose(p.data[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())
    lp = T.log_softmax(x, mask)
    assert lp.data[0, 1] == -np.inf
    g = backprop(T.sum(T.pick(lp, np.array([2]))))[x]
    assert g[0, 1] == 0.0


def test_softmax_and_log_softmax_grads():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4))
    w = rng.normal(size=(2, 4))

    def sm(z):
        e = np.exp(z - z.max(1, keepdims=True))
        return e / e.sum(1, keepdims=True)

    (g,) = grad_of(lambda t: T.sum(T.softmax(t) * Tensor(w)), x)
    np.testing.assert_allclose(g, numeric_grad(lambda z: np.sum(sm(z) * w), x), rtol=1e-6, atol=1e-9)
    (g,) = grad_of(lambda t: T.sum(T.log_softmax(t) * Tensor(w)), x)
    np.testing.assert_allclose(g, numeric_grad(lambda z: np.sum(np.log(sm(z)) * w), x), rtol=1e-6, atol=1e-9)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad
    assert T.grad_enabled()


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["other"] = T.grad_enabled()

    with T.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        seen["here"] = T.grad_enabled()
    assert seen == {"other": True, "here": False}


def test_backprop_deep_chain_is_iterative():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    assert backprop(T.sum(y))[x][0] == 1.0


def test_reverse_gradient_zero_for_unused_param():
    params = ParamStore()
    a = params.add("a", np.array([1.0, 2.0]))
    params.add("unused", np.ones(3))
    grads = reverse_gradient(T.sum(a * a), params)
    np.testing.assert_array_equal(grads["unused"], np.zeros(3))


def test_reverse_gradient_requires_scalar():
    params = ParamStore()
    a = params.add("a", np.ones(2))
    with pytest.raises(ValueError):
        reverse_gradient(a * a, params)


def test_param_store_rejects_duplicates():
    params = ParamStore()
    params.add("w", np.ones(2))
    with pytest.raises(KeyError):
        params.add("w", np.ones(2))


def test_finite_diff_square_sum_is_tight():
    params = ParamStore()
    params.add("w", np.array([0.3, -1.2, 2.5]))
    report = finite_diff_check(lambda p: T.sum(p["w"] * p["w"]), params)
    assert report.passed and report.worst < 1e-8


def test_finite_diff_constant_function():
    params = ParamStore()
    params.add("w", np.array([0.3, -1.2]))
    report = finite_diff_check(lambda p: Tensor(4.0), params)
    assert report.passed and report.worst == 0.0


def test_finite_diff_detects_wrong_gradient():
    params = ParamStore()
    params.add("w", np.array([0.7, 1.3]))

    def f(p):
        # value is sum(w^2) but the recorded gradient is w (half the truth)
        w = p["w"]
        return T.sum(w * Tensor(w.data)) * 1.0

    report = finite_diff_check(f, params)
    assert not report.passed
    assert "FAIL" in report.summary()


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(1.0, 1.0) == 0.0


def test_finite_diff_restores_params():
    params = ParamStore()
    w = np.array([0.1, 0.2, 0.3])
    params.add("w", w.copy())
    finite_diff_check(lambda p: T.sum(T.tanh(p["w"])), params)
    np.testing.assert_array_equal(params["w"].data, w)
