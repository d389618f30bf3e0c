import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpcflow import diffengine as de

finite = st.floats(-10, 10, allow_nan=False)


def test_square_value_and_grad():
    x = de.leaf(np.array(3.0))
    y = de.square(x)
    de.backward(y)
    assert y.value == 9.0
    assert x.grad == 6.0


def test_sum_of_add_is_linear():
    a, b = de.leaf([1.0, 2.0]), de.leaf([3.0, 4.0])
    out = de.sum(de.add(a, b))
    de.backward(out)
    assert out.value == 10.0
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [1.0, 1.0])


def test_sqnorm():
    x = de.leaf([3.0, 4.0])
    y = de.sqnorm(x)
    de.backward(y)
    assert y.value == 25.0
    np.testing.assert_array_equal(x.grad, [6.0, 8.0])


def test_mean_of_squares():
    x = de.leaf([1.0, 2.0, 3.0])
    de.backward(de.mean(de.square(x)))
    np.testing.assert_allclose(x.grad, [2 / 3, 4 / 3, 2.0], rtol=1e-15)


def test_disconnected_leaf_has_exact_zero_grad():
    x, z = de.leaf([1.0, 2.0]), de.leaf([5.0, 6.0])
    de.backward(de.sqnorm(x))
    np.testing.assert_array_equal(z.grad, [0.0, 0.0])


def test_grads_accumulate_over_reuse():
    x = de.leaf([2.0])
    de.backward(de.sum(de.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4.0])


def test_nonscalar_root_rejected():
    with pytest.raises(de.ShapeError):
        de.backward(de.leaf([1.0, 2.0]))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(de.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        de.add(de.leaf([1.0, 2.0]), de.leaf([1.0, 2.0, 3.0]))


def test_operators_match_functions():
    a, b = de.leaf([1.0, 2.0]), de.leaf([3.0, 5.0])
    np.testing.assert_array_equal((a + b).value, [4.0, 7.0])
    np.testing.assert_array_equal((a - b).value, [-2.0, -3.0])
    np.testing.assert_array_equal((-a).value, [-1.0, -2.0])
    np.testing.assert_array_equal((a * b).value, [3.0, 10.0])


def test_two_layer_mlp_matches_finite_differences(rng):
    W1, b1 = rng.normal(size=(5, 3)), rng.normal(size=5)
    W2 = rng.normal(size=(2, 5))
    target = rng.normal(size=2)

    def f(x):
        h = de.tanh(de.add(de.matvec(W1, x), b1))
        return de.sqnorm(de.sub(de.matvec(W2, h), target))

    assert de.fd_check(f, rng.normal(size=3)) < 1e-4


def test_fd_check_quadratic_is_near_exact():
    assert de.fd_check(de.sqnorm, [1.0, -2.0]) < 1e-7


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_check_raises_on_nonfinite():
    with pytest.raises(FloatingPointError):
        de.fd_check(lambda x: de.sum(de.exp(de.scale(x, 1e3))), [1.0])


def test_scope_tags_backward_rules():
    x = de.leaf([1.0, 2.0])
    with de.scope("inner"):
        y = de.tanh(x)
    stats = de.backward(de.sqnorm(y))
    assert stats.by_scope["inner"] == 1
    assert stats.rules_applied == 2


def test_zero_grad_resets():
    x = de.leaf([1.0])
    de.backward(de.sqnorm(x))
    de.zero_grad([x])
    np.testing.assert_array_equal(x.grad, [0.0])


@pytest.mark.parametrize("op", [de.tanh, de.sin, de.cos, de.exp, de.softplus, de.square])
def test_elementwise_gradients(op, rng):
    assert de.fd_check(lambda x: de.sum(op(x)), rng.normal(size=4)) < 1e-6


def test_matrix_ops_gradients(rng):
    B = rng.normal(size=(3, 4))

    def f(a):
        A = de.reshape(a, (2, 3))
        M = de.matmul(A, B)
        rows = de.add(M, de.broadcast_rows(de.take(de.reshape(M, (8,)), [0, 1, 2, 3]), 2))
        return de.sum(de.square(de.concat([de.transpose(rows), de.transpose(rows)], axis=0)))

    assert de.fd_check(f, rng.normal(size=6)) < 1e-6


def test_linop_uses_adjoint(rng):
    A = rng.normal(size=(3, 4))
    x0 = rng.normal(size=4)
    f = lambda x: de.sqnorm(de.linop(x, lambda v: A @ v, lambda w: A.T @ w, "dense"))  # noqa: E731
    assert de.fd_check(f, x0) < 1e-6


def test_sqrt_gradient():
    assert de.fd_check(lambda x: de.sum(de.sqrt(x)), [1.0, 4.0, 9.0]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_sqnorm_gradient_is_twice_x(x):
    xl = de.leaf(x)
    de.backward(de.sqnorm(xl))
    np.testing.assert_array_equal(xl.grad, 2.0 * x)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_add_is_commutative(a, b):
    np.testing.assert_array_equal(de.add(a, b).value, de.add(b, a).value)
