import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttdioc import duals as dm
from ttdioc.duals import BoxedFunction, Dual, EvaluationError, boxed, grad_check


def test_seed_identity():
    x = Dual.seed([1.0, 2.0, 3.0])
    assert np.array_equal(x.dot, np.eye(3))


def test_product_rule_exact():
    x = Dual.seed([3.0, 5.0])
    a, b = x[0], x[1]
    p = a * b
    assert p.val == 15.0
    # d(ab) = b da + a db, exactly
    assert np.array_equal(p.dot, np.array([5.0, 3.0]))


def test_quotient_and_chain():
    x = Dual.seed([2.0, 4.0])
    y = dm.sin(x[0]) / x[1]
    expected = np.array([np.cos(2.0) / 4.0, -np.sin(2.0) / 16.0])
    assert np.allclose(y.dot, expected, atol=1e-15)


def test_constant_mixing_shares_no_derivative():
    x = Dual.seed([1.0, 2.0])
    y = x * np.array([2.0, 3.0]) + 7.0
    assert np.allclose(y.val, [9.0, 13.0])
    assert np.allclose(y.dot, np.diag([2.0, 3.0]))


def test_scalar_vector_broadcast():
    x = Dual.seed([1.0, 2.0, 3.0])
    s = x.sum()
    y = x * s
    assert np.allclose(y.val, [6.0, 12.0, 18.0])
    # d(x_i * sum) = e_i * sum + x_i * ones
    expected = 6.0 * np.eye(3) + np.outer([1.0, 2.0, 3.0], np.ones(3))
    assert np.allclose(y.dot, expected)


def test_pow_sqrt_exp():
    x = Dual.seed([4.0])
    assert np.allclose((x[0] ** 3).dot, [48.0])
    assert np.allclose(dm.sqrt(x[0]).dot, [0.25])
    assert np.allclose(dm.exp(x[0]).dot, [np.exp(4.0)])


def test_stack_and_concat_mixed():
    x = Dual.seed([1.0, 2.0])
    v = dm.stack([x[0], 5.0, x[1] * 2.0])
    assert np.allclose(v.val, [1.0, 5.0, 4.0])
    assert np.allclose(v.dot, [[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
    w = dm.concat([x, np.array([1.0])])
    assert w.val.shape == (3,)


@given(
    st.lists(st.floats(-3, 3), min_size=2, max_size=5),
    st.integers(min_value=0, max_value=4),
)
@settings(max_examples=50, deadline=None)
def test_polynomial_gradient_matches_analytic(coeffs, idx):
    coeffs = np.asarray(coeffs)
    idx = idx % len(coeffs)

    def poly(x):
        acc = x[idx] * 0.0
        for k, ck in enumerate(coeffs):
            acc = acc + ck * x[idx] ** (k + 1)
        return acc

    x0 = np.linspace(0.5, 1.5, len(coeffs))
    out = poly(Dual.seed(x0))
    analytic = sum(
        ck * (k + 1) * x0[idx] ** k for k, ck in enumerate(coeffs)
    )
    assert out.dot[idx] == pytest.approx(analytic, rel=1e-12, abs=1e-12)


def _quadratic():
    return boxed(1, lambda x: x[0] * x[0])


def test_grad_check_quadratic():
    assert grad_check(_quadratic(), np.array([3.0]), 1e-5) <= 1e-8


def test_grad_check_sincos():
    f = boxed(2, lambda x: dm.sin(x[0]) * dm.cos(x[1]))
    assert grad_check(f, np.array([0.3, 0.7]), 1e-5) <= 1e-6


def test_grad_check_constant():
    f = BoxedFunction(2, lambda x: (4.2, np.zeros(2)))
    assert grad_check(f, np.array([1.0, -1.0]), 1e-5) == 0.0


def test_grad_check_nonfinite_raises():
    f = BoxedFunction(
        1, lambda x: (float("inf") if x[0] > 0.999995 else 1.0, np.zeros(1))
    )
    with pytest.raises(EvaluationError):
        grad_check(f, np.array([1.0 - 1e-5]), 1e-5)


def test_boxed_rejects_nonfinite_value():
    f = boxed(1, lambda x: x[0] * float("nan"))
    with pytest.raises(EvaluationError):
        f(np.array([2.0]))
