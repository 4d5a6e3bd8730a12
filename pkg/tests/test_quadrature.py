import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from picircuits.quadrature import (QuadratureRule, gauss_legendre, integrate_1d, make_rule, tensor_product_weights,
                                   trapezoidal)


def test_trapezoidal_small_rules():
    r = trapezoidal(2)
    assert r.points.tolist() == [-1, 1] and r.weights.tolist() == [1, 1]
    r = trapezoidal(3)
    assert r.points.tolist() == [-1, 0, 1] and r.weights.tolist() == [0.5, 1, 0.5]
    assert trapezoidal(5).weights.sum() == pytest.approx(2, abs=1e-15)


def test_trapezoidal_rejects_small_k():
    with pytest.raises(ValueError):
        trapezoidal(1)


def test_rule_is_immutable():
    r = trapezoidal(4)
    with pytest.raises(ValueError):
        r.points[0] = 3


def test_rule_validation():
    with pytest.raises(ValueError):
        QuadratureRule([0.0, 1.0], [1.0, -1.0])
    with pytest.raises(ValueError):
        make_rule("simpson", 3)


def test_integrate_examples():
    assert integrate_1d(lambda z: np.ones_like(z), trapezoidal(7)) == pytest.approx(2)
    assert integrate_1d(lambda z: z ** 2, trapezoidal(3)) == pytest.approx(1.0)


def test_integrate_scalar_callable():
    assert integrate_1d(math.cos, trapezoidal(3)) == pytest.approx(
        0.5 * math.cos(-1) + math.cos(0) + 0.5 * math.cos(1))


def test_worked_integral_closed_form():
    X, Z = 2.0, 0.5
    val = integrate_1d(lambda y: (2 * Z - y ** 2) * (X ** 2 - 3 * X + 4 * y), trapezoidal(1025))
    assert val == pytest.approx(-2.6667, abs=1e-4)
    assert val == pytest.approx(2 / 3 * X * (X - 3) * (6 * Z - 1), abs=1e-5)


@given(st.integers(2, 60), st.floats(-5, 5), st.floats(-5, 5))
def test_trapezoid_exact_for_affine(K, a, b):
    assert integrate_1d(lambda z: a * z + b, trapezoidal(K)) == pytest.approx(2 * b, abs=1e-12)


def test_tensor_product_weights():
    r = trapezoidal(3)
    np.testing.assert_array_equal(tensor_product_weights(r, 1), r.weights)
    np.testing.assert_array_equal(tensor_product_weights(trapezoidal(2), 2), [1, 1, 1, 1])
    w = tensor_product_weights(r, 2)
    assert w.sum() == pytest.approx(4)
    assert w[1 * 3 + 0] == r.weights[1] * r.weights[0]
    with pytest.raises(ValueError):
        tensor_product_weights(r, 0)


@given(st.integers(2, 9), st.integers(1, 3))
def test_tensor_product_weights_total(K, n):
    assert tensor_product_weights(trapezoidal(K), n).sum() == pytest.approx(2 ** n)


def test_gauss_legendre_is_exact_for_polynomials():
    r = gauss_legendre(4)
    assert integrate_1d(lambda z: z ** 6, r) == pytest.approx(2 / 7, rel=1e-12)
    assert make_rule("gauss-legendre", 4).name == "gauss-legendre"
