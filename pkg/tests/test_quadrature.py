from math import factorial

import numpy as np
import pytest

from implicitflow.quadrature import gauss_legendre, triangle_rule


def monomial_exact(a, b):
    # int_T x^a y^b over conv{0, e1, e2}
    return factorial(a) * factorial(b) / factorial(a + b + 2)


@pytest.mark.parametrize("degree", [1, 3, 5, 7, 9])
def test_triangle_rule_exactness(degree):
    rule = triangle_rule(degree)
    assert rule.degree >= degree
    assert np.all(rule.weights > 0)
    assert rule.weights.sum() == pytest.approx(0.5, abs=1e-15)
    x, y = rule.points.T
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            val = np.dot(rule.weights, x ** a * y ** b)
            assert val == pytest.approx(monomial_exact(a, b), abs=1e-14)


def test_triangle_rule_points_inside():
    p = triangle_rule(7).points
    assert np.all(p > 0) and np.all(p.sum(axis=1) < 1)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_gauss_legendre_interval(n):
    x, w = gauss_legendre(n, 2.0, 5.0)
    assert w.sum() == pytest.approx(3.0)
    for k in range(2 * n):
        assert np.dot(w, x ** k) == pytest.approx((5.0 ** (k + 1) - 2.0 ** (k + 1)) / (k + 1), rel=1e-13)
