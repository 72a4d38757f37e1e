"""Quadrature rules on the reference triangle and on intervals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = ["TriangleRule", "triangle_rule", "gauss_legendre"]


@dataclass(frozen=True)
class TriangleRule:
    points: np.ndarray  # (nq, 2) on conv{0, e1, e2}
    weights: np.ndarray  # (nq,), sum = 1/2
    degree: int


def triangle_rule(degree: int = 7) -> TriangleRule:
    """Collapsed (Duffy) Gauss-Jacobi x Gauss-Legendre product rule.

    Exact for polynomials of total degree ``<= degree``; all weights positive.
    """
    n = max(1, (int(degree) + 2) // 2)
    u, wu = roots_jacobi(n, 1.0, 0.0)  # weight (1 - u) on [-1, 1]
    v, wv = roots_legendre(n)
    x = 0.5 * (1.0 + u)
    s = 0.5 * (1.0 + v)
    X = np.repeat(x, n)
    Y = (1.0 - X) * np.tile(s, n)
    W = np.outer(0.25 * wu, 0.5 * wv).ravel()
    pts = np.column_stack([X, Y])
    pts.setflags(write=False)
    W.setflags(write=False)
    return TriangleRule(pts, W, 2 * n - 1)


def gauss_legendre(n: int, a: float = 0.0, b: float = 1.0):
    """Nodes and weights of the ``n``-point Gauss-Legendre rule on [a, b]."""
    x, w = roots_legendre(int(n))
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w
