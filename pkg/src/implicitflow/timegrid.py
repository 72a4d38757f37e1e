"""Uniform time grids, difference quotients, interpolants and time averages."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .quadrature import gauss_legendre

__all__ = [
    "TimeGrid",
    "StateHistory",
    "dt_quotient",
    "interp_const",
    "interp_affine",
    "time_average",
    "interpolant_norms",
]


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant nodes ``t_i = i T / l`` on [0, T]."""

    T: float
    l: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError("T must be a positive finite number")
        if int(self.l) != self.l or self.l < 1:
            raise ValueError("l must be a positive integer")
        object.__setattr__(self, "l", int(self.l))

    @property
    def delta(self) -> float:
        return self.T / self.l

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.l + 1) * self.delta

    def node(self, i: int) -> float:
        return i * self.delta

    def interval(self, i: int):
        if not 1 <= i <= self.l:
            raise IndexError(f"interval index {i} outside 1..{self.l}")
        return (i - 1) * self.delta, i * self.delta

    def locate(self, t: float) -> int:
        """Index ``i`` with ``t`` in (t_{i-1}, t_i]; 0 maps to 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t = {t} outside [0, {self.T}]")
        i = int(math.ceil(t / self.delta - 1e-12))
        return min(max(i, 1), self.l)


class StateHistory:
    """Coefficient vectors ``phi_0, ..., phi_l`` attached to a grid."""

    def __init__(self, grid: TimeGrid, values: Sequence):
        vals = [np.asarray(v, dtype=float) for v in values]
        if len(vals) != grid.l + 1:
            raise ValueError(f"expected {grid.l + 1} states, got {len(vals)}")
        shapes = {v.shape for v in vals}
        if len(shapes) != 1:
            raise ValueError("all states must have the same shape")
        self.grid = grid
        self.values = np.stack(vals)
        self.values.setflags(write=False)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


def dt_quotient(history: StateHistory, i: int) -> np.ndarray:
    """``(phi_i - phi_{i-1}) / delta``."""
    l = history.grid.l
    if not 1 <= i <= l:
        raise ValueError(f"difference quotient needs 1 <= i <= {l}, got {i}")
    return (history[i] - history[i - 1]) / history.grid.delta


def interp_const(history: StateHistory, t: float) -> np.ndarray:
    """Left-continuous piecewise constant interpolant: ``phi_i`` on (t_{i-1}, t_i]."""
    g = history.grid
    if not 0 < t <= g.T:
        raise ValueError(f"piecewise constant interpolant defined on (0, {g.T}], got t = {t}")
    return history[g.locate(t)].copy()


def interp_affine(history: StateHistory, t: float) -> np.ndarray:
    g = history.grid
    if not 0 <= t <= g.T:
        raise ValueError(f"affine interpolant defined on [0, {g.T}], got t = {t}")
    i = g.locate(t)
    ti = g.node(i)
    return history[i] - (ti - t) * dt_quotient(history, i)


def time_average(evaluator: Callable, grid: TimeGrid, i: int, quad_points: int = 4):
    """Mean of ``evaluator(t)`` over (t_{i-1}, t_i] by Gauss-Legendre.

    The evaluator may return scalars or arrays.
    """
    if quad_points < 1:
        raise ValueError("quad_points must be >= 1")
    a, b = grid.interval(i)
    ts, ws = gauss_legendre(quad_points, a, b)
    acc = None
    for t, w in zip(ts, ws):
        v = np.asarray(evaluator(t), dtype=float) * (w / (b - a))
        acc = v if acc is None else acc + v
    return acc if acc.ndim else float(acc)


def interpolant_norms(history: StateHistory, p: float, spatial_norm: Callable, quad_points: int = 8):
    """Bochner norms of the piecewise constant and affine interpolants.

    ``L^p(0,T;X)`` norms, with ``spatial_norm`` the norm of X applied to a
    coefficient vector.  The constant one is exact; the affine one uses
    ``quad_points`` Gauss points per interval (exact maximum for p = inf,
    by convexity of the norm along segments).
    """
    if not p >= 1:
        raise ValueError("p must lie in [1, inf]")
    g = history.grid
    node_norms = np.array([spatial_norm(v) for v in history.values])
    if math.isinf(p):
        return float(node_norms[1:].max()), float(node_norms.max())
    const = (g.delta * np.sum(node_norms[1:] ** p)) ** (1.0 / p)
    s, w = gauss_legendre(quad_points, 0.0, 1.0)
    total = 0.0
    for i in range(1, g.l + 1):
        a, b = history[i - 1], history[i]
        vals = np.array([spatial_norm((1 - si) * a + si * b) for si in s])
        total += g.delta * np.dot(w, vals ** p)
    return float(const), float(total ** (1.0 / p))
