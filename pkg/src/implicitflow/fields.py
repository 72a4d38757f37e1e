"""Built-in initial velocities, forcings and exact solutions.

All fields vanish on the boundary of the unit square and are pointwise
divergence free.  Callables take points of shape (N, 2); forcings also take
the time as first argument.

The manufactured Newtonian case uses the stream function
``psi = a(x) b(y)`` with ``a(s) = b(s) = s^2 (1 - s)^2`` and
``u = exp(-t) curl psi``, zero pressure and stress ``2 mu D u``.  Its
forcing ``f = du/dt + (u . grad) u - mu lap u`` was derived symbolically
and simplified to the closed form in :func:`manufactured_forcing`.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "BUILTIN_FIELDS",
    "REJECTED_FIELDS",
    "taylor_vortex",
    "manufactured_velocity",
    "manufactured_forcing",
    "make_initial",
    "make_forcing",
]

BUILTIN_FIELDS = ("zero", "taylor_vortex", "manufactured_newtonian")
REJECTED_FIELDS = {"lid_driven": "lid_driven needs a non-homogeneous boundary condition, which is not supported"}


def _quartic(s):
    """s^2 (1-s)^2 and its first three derivatives."""
    return (s ** 2 * (1 - s) ** 2,
            2 * s * (1 - s) * (1 - 2 * s),
            2 - 12 * s + 12 * s ** 2,
            24 * s - 12)


def manufactured_velocity(t, X):
    X = np.asarray(X, dtype=float)
    a, a1, _, _ = _quartic(X[..., 0])
    b, b1, _, _ = _quartic(X[..., 1])
    e = np.exp(-t)
    return np.stack([e * a * b1, -e * a1 * b], axis=-1)


def manufactured_forcing(mu: float = 1.0):
    def forcing(t, X):
        X = np.asarray(X, dtype=float)
        a, a1, a2, a3 = _quartic(X[..., 0])
        b, b1, b2, b3 = _quartic(X[..., 1])
        e, e2 = np.exp(-t), np.exp(-2 * t)
        f1 = -e * a * b1 + e2 * a * a1 * (b1 ** 2 - b * b2) - mu * e * (a2 * b1 + a * b3)
        f2 = e * a1 * b + e2 * b * b1 * (a1 ** 2 - a * a2) + mu * e * (a3 * b + a1 * b2)
        return np.stack([f1, f2], axis=-1)
    return forcing


def taylor_vortex(X):
    """``curl(sin^2(pi x) sin^2(pi y))``: a single smooth vortex cell."""
    X = np.asarray(X, dtype=float)
    x, y = np.pi * X[..., 0], np.pi * X[..., 1]
    sx2, sy2 = np.sin(x) ** 2, np.sin(y) ** 2
    dx = np.pi * np.sin(2 * x)
    dy = np.pi * np.sin(2 * y)
    return np.stack([sx2 * dy, -dx * sy2], axis=-1)


def _zero(X):
    return np.zeros_like(np.asarray(X, dtype=float))


def _check(name):
    if name in REJECTED_FIELDS:
        raise ValueError(REJECTED_FIELDS[name])
    if name not in BUILTIN_FIELDS:
        raise ValueError(f"unknown built-in field {name!r}; choose from {BUILTIN_FIELDS}")


def make_initial(name: str):
    _check(name)
    if name == "zero":
        return _zero
    if name == "taylor_vortex":
        return taylor_vortex
    return lambda X: manufactured_velocity(0.0, X)


def make_forcing(name: str, mu: float = 1.0):
    _check(name)
    if name == "zero":
        return lambda t, X: _zero(X)
    if name == "taylor_vortex":
        return lambda t, X: np.exp(-t) * taylor_vortex(X)
    return manufactured_forcing(mu)
