import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from dscope import tensor as T
from dscope.tensor import DimensionError, GradTape, NumericError, Tensor, grad_check


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    out = T.matmul(_t([[1, 0], [0, 1]]), _t([[3, 4], [5, 6]]))
    assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_dot():
    assert_array_equal(T.matmul(_t([[1, 2]]), _t([[3], [4]])).data, [[11]])


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(_t(np.ones((2, 3))), _t(np.ones((2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_associative(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (_t(rng.standard_normal(s)) for s in ((m, k), (k, n), (n, p)))
    left = T.matmul(T.matmul(a, b), c).data
    right = T.matmul(a, T.matmul(b, c)).data
    assert_allclose(left, right, rtol=1e-9, atol=1e-9 * np.abs(left).max())


def test_matmul_gradients_are_transposed_products():
    rng = np.random.default_rng(0)
    a, b = _t(rng.standard_normal((3, 4))), _t(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    with GradTape() as tape:
        out = T.sum_all(T.mul(T.matmul(a, b), g))
    ga, gb = tape.gradient(out, [a, b])
    assert_allclose(ga, g @ b.data.T, rtol=1e-12)
    assert_allclose(gb, a.data.T @ g, rtol=1e-12)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_row():
    assert_allclose(T.softmax_rows(_t([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=1e-15)


def test_softmax_large_inputs_are_stable():
    assert_array_equal(T.softmax_rows(_t([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


def test_softmax_ln3():
    assert_allclose(T.softmax_rows(_t([[0.0, math.log(3)]])).data, [[0.25, 0.75]], rtol=1e-14)


def test_softmax_masked_positions_are_zero():
    mask = np.array([[0.0, -np.inf], [0.0, 0.0]])
    out = T.softmax_rows(_t([[5.0, 7.0], [1.0, 2.0]]), mask).data
    assert out[0, 1] <= 1e-30
    assert out[0, 0] == 1.0


def test_softmax_fully_masked_row():
    with pytest.raises(NumericError, match="fully masked attention row"):
        T.softmax_rows(_t([[1.0, 2.0]]), np.array([[-np.inf, -1e10]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 7), st.floats(-50, 50), st.integers(0, 2**32 - 1))
def test_softmax_rows_normalized_and_shift_invariant(m, n, c, seed):
    x = np.random.default_rng(seed).normal(0, 5, (m, n))
    s = T.softmax_rows(_t(x)).data
    assert np.all(s >= 0)
    assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert_allclose(T.softmax_rows(_t(x + c)).data, s, atol=1e-12)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_row():
    out = T.layer_norm(_t([[1.0, 1.0, 1.0, 1.0]]), _t(np.ones(4)), _t(np.zeros(4)), 1e-5)
    assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_already_standard():
    out = T.layer_norm(_t([[-1.0, 1.0]]), _t(np.ones(2)), _t(np.zeros(2)), 1e-14)
    assert_allclose(out.data, [[-1.0, 1.0]], rtol=1e-12)


def test_layer_norm_affine():
    out = T.layer_norm(_t([[0.0, 2.0]]), _t([2.0, 2.0]), _t([1.0, 1.0]), 1e-14)
    assert_allclose(out.data, [[-1.0, 3.0]], rtol=1e-12)


def test_layer_norm_gain_shape_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(_t(np.ones((2, 3))), _t(np.ones(2)), _t(np.zeros(3)))


# ---------------------------------------------------------------------------
# tape semantics


def test_gradient_of_unused_tensor_is_zero():
    a, unused = _t([1.0, 2.0]), _t([[3.0, 4.0]])
    with GradTape() as tape:
        out = T.sum_all(T.mul(a, a))
    ga, gu = tape.gradient(out, [a, unused])
    assert_array_equal(ga, [2.0, 4.0])
    assert_array_equal(gu, np.zeros((1, 2)))


def test_shared_input_accumulates():
    a = _t([3.0])
    with GradTape() as tape:
        out = T.sum_all(T.add(T.mul(a, a), a))
    (g,) = tape.gradient(out, [a])
    assert_array_equal(g, [7.0])


def test_no_tape_no_recording():
    a = _t([1.0])
    with GradTape() as tape:
        pass
    T.mul(a, a)
    assert tape.nodes == []


def test_tensor_is_immutable_and_copies():
    src = np.ones(3)
    t = Tensor(src)
    src[0] = 5.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 2.0


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_quadratic():
    theta = _t(np.random.default_rng(1).standard_normal((4, 5)))
    rep = grad_check(lambda: T.sum_all(T.mul(theta, theta)), [theta], h=1e-5, tol=1e-6)
    assert rep["ok"], rep
    assert rep["max_rel_error"] < 1e-6


def test_grad_check_constant_function():
    theta = _t(np.ones(3))
    const = _t(np.array(2.5))
    with GradTape() as tape:
        out = T.add(const, T.sum_all(T.mul(theta, 0.0)))
    (g,) = tape.gradient(out, [theta])
    assert_array_equal(g, 0.0)
    rep = grad_check(lambda: T.add(const, T.sum_all(T.mul(theta, 0.0))), [theta])
    assert rep["max_rel_error"] == 0.0


def test_grad_check_non_finite_raises():
    theta = _t([1.0])
    with pytest.raises(NumericError):
        grad_check(lambda: T.sum_all(T.mul(theta, np.inf)), [theta])


def _ops():
    rng = np.random.default_rng(3)
    w = _t(rng.standard_normal((4, 3)))
    g, b = _t(1 + 0.1 * rng.standard_normal(3)), _t(rng.standard_normal(3))
    causal = np.where(np.arange(3)[None, :] <= np.arange(4)[:, None], 0.0, -np.inf)
    ops = {
        "gelu": lambda x: T.gelu(x),
        "linear": lambda x: T.linear(x, w, b),
        "layer_norm": lambda x: T.layer_norm(T.linear(x, w), g, b, 1e-5),
        "softmax": lambda x: T.softmax_rows(T.linear(x, w)),
        "masked_softmax": lambda x: T.softmax_rows(T.linear(x, w), causal),
        "transpose": lambda x: T.transpose(T.reshape(x, (2, -1, 2)), (2, 0, 1)),
        "sub": lambda x: T.sub(x, T.mul(x, x)),
    }
    return ops, [w, g, b]


@pytest.mark.parametrize("op", ["gelu", "linear", "layer_norm", "softmax", "masked_softmax", "transpose", "sub"])
def test_op_gradients_match_finite_differences(op):
    ops, extra = _ops()
    rng = np.random.default_rng(11)
    x = _t(rng.standard_normal((4, 4)))
    weights = _t(rng.standard_normal(ops[op](x).shape))
    f = lambda: T.sum_all(T.mul(ops[op](x), weights))  # noqa: E731
    rep = grad_check(f, [x] + extra, h=1e-6)
    assert rep["max_rel_error"] < 1e-4, rep


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_random_shape_softmax_matmul_gradients(m, n, seed):
    rng = np.random.default_rng(seed)
    a = _t(rng.standard_normal((m, n)))
    b = _t(rng.standard_normal((n, n)))
    mask = np.triu(np.full((n, n), -np.inf), 1)[:m] if m <= n else None
    tgt = rng.standard_normal((m, n))
    f = lambda: T.mean_squared_error(T.softmax_rows(T.matmul(a, b), mask), tgt)  # noqa: E731
    rep = grad_check(f, [a, b], h=1e-6)
    assert rep["max_rel_error"] < 1e-4, rep
