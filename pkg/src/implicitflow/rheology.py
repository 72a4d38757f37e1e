"""Constitutive graphs, radial selections and their continuous approximations.

Every shipped law is radial: ``S(D) = s(|D|) D / |D|`` with a nondecreasing
scalar law ``s`` on [0, inf), ``s(0) = 0``, possibly discontinuous at the
points of ``discontinuity_set`` (which always contains 0).  The scalar law is
extended as an odd function to the whole real line before it is interpolated
or mollified.

Two approximations make the law continuous:

* ``affine_interp`` replaces ``s`` on each window ``[a_i - 1/k, a_i + 1/k]``
  by the affine interpolant of its end values (requires ``k >= k_0``);
* ``mollify`` convolves the odd scalar law with the scaled bump kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.special import expit

__all__ = [
    "MODELS",
    "MODES",
    "GraphModel",
    "GraphApprox",
    "ExponentPack",
    "BatteryReport",
    "exponents",
    "eval_selection",
    "eval_approx",
    "approx_derivative",
    "check_assumption_battery",
    "mollifier_kernel",
    "mollifier_mass",
    "frobenius",
]

MODELS = ("newtonian", "power_law", "bingham", "herschel_bulkley")
MODES = ("exact", "mollify", "affine_interp")


def frobenius(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    return np.sqrt(np.einsum("...ij,...ij->...", D, D))


# --- exponents ---------------------------------------------------------------

def _conj(p: float) -> float:
    if p <= 1:
        return math.inf
    return p / (p - 1.0)


@dataclass(frozen=True)
class ExponentPack:
    q: float
    d: int
    q_prime: float
    two_q_prime: float
    hat_q: float
    eta: float
    tau: float
    mu: float
    above_critical: bool  # q > 2d/(d+2)


def exponents(q: float, d: int = 2) -> ExponentPack:
    """Conjugate and derived integrability exponents for growth ``q`` in dimension ``d``."""
    if not q > 1:
        raise ValueError("q must exceed 1")
    if d not in (2, 3):
        raise ValueError("d must be 2 or 3")
    qp = _conj(q)
    r = q * (d + 2) / (2 * d)
    hat_q = max(_conj(r), q) if r > 1 else math.inf
    eta = max(2 * qp, q * (d + 2) / d)
    tau = min(qp, _conj(2 * qp))
    mu = min(r, qp, _conj(2 * qp))
    return ExponentPack(q, d, qp, 2 * qp, hat_q, eta, tau, mu, r > 1)


# --- models ------------------------------------------------------------------

@dataclass(frozen=True)
class GraphModel:
    """Radial constitutive law.

    Scalar laws for ``s > 0``: newtonian ``2 mu s``; power_law ``2 mu s**(q-1)``;
    bingham ``tau_y + 2 mu s``; herschel_bulkley ``tau_y + 2 mu s**(q-1)``.
    ``jumps`` adds upward steps ``height`` at radii ``location > 0``
    (stick-slip type laws), which enlarges the discontinuity set.
    ``tau_y_fn(t, x)`` optionally makes the yield stress time dependent.
    """

    name: str
    mu: float = 1.0
    tau_y: float = 0.0
    q: float = 2.0
    jumps: tuple = ()
    tau_y_fn: Optional[Callable] = field(default=None, compare=False)
    tau_y_max: Optional[float] = None

    def __post_init__(self):
        if self.name not in MODELS:
            raise ValueError(f"unknown model {self.name!r}; choose from {MODELS}")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.q > 1:
            raise ValueError("q must exceed 1")
        if self.tau_y < 0:
            raise ValueError("tau_y must be nonnegative")
        if self.name in ("newtonian", "bingham") and self.q != 2:
            raise ValueError(f"{self.name} requires q = 2")
        if self.name in ("newtonian", "power_law") and (self.tau_y != 0 or self.tau_y_fn is not None):
            raise ValueError(f"{self.name} has no yield stress")
        jumps = tuple(sorted((float(a), float(h)) for a, h in self.jumps))
        if any(a <= 0 or h < 0 for a, h in jumps):
            raise ValueError("jump locations must be positive and heights nonnegative")
        if len({a for a, _ in jumps}) != len(jumps):
            raise ValueError("jump locations must be distinct")
        object.__setattr__(self, "jumps", jumps)
        if self.tau_y_fn is not None and self.tau_y_max is None:
            raise ValueError("tau_y_max (an upper bound of tau_y_fn) is required")

    @property
    def autonomous(self) -> bool:
        return self.tau_y_fn is None

    @property
    def q_prime(self) -> float:
        return _conj(self.q)

    @property
    def discontinuity_set(self) -> tuple:
        return (0.0,) + tuple(a for a, _ in self.jumps)

    @property
    def continuous(self) -> bool:
        return self.tau_y == 0 and self.tau_y_fn is None and all(h == 0 for _, h in self.jumps)

    def yield_stress(self, t=None, x=None) -> float:
        if self.tau_y_fn is None:
            return self.tau_y
        return float(self.tau_y_fn(0.0 if t is None else t, x))

    def radial(self, s, t=None) -> np.ndarray:
        """Odd extension of the scalar selection, vectorized in ``s``."""
        s = np.asarray(s, dtype=float)
        r = np.abs(s)
        pos = r > 0
        val = 2 * self.mu * (r if self.q == 2 else r ** (self.q - 1))
        if self.name in ("bingham", "herschel_bulkley"):
            val = val + self.yield_stress(t) * pos
        for a, h in self.jumps:
            val = val + h * (r > a)
        return np.sign(s) * val

    def radial_slope(self, s, t=None) -> np.ndarray:
        """Derivative of the scalar law away from its jumps (right limit at 0)."""
        r = np.abs(np.asarray(s, dtype=float))
        if self.q == 2:
            return np.full_like(r, 2 * self.mu)
        with np.errstate(divide="ignore"):
            return 2 * self.mu * (self.q - 1) * r ** (self.q - 2)

    # coercivity (A4): D:S >= -g + c_*(|D|^q + |S|^q')
    def _total_offset(self, t=None) -> float:
        tau = self.yield_stress(t) if self.name in ("bingham", "herschel_bulkley") else 0.0
        return tau + sum(h for _, h in self.jumps)

    @property
    def c_star(self) -> float:
        qp, m2 = self.q_prime, 2 * self.mu
        if self.continuous:
            return m2 / (1 + m2 ** qp)
        return m2 / (1 + 2 ** (qp - 1) * m2 ** qp)

    def g(self, t=None) -> float:
        if self.continuous:
            return 0.0
        qp = self.q_prime
        return self.c_star * 2 ** (qp - 1) * self._total_offset(t) ** qp


# --- mollifier ---------------------------------------------------------------

def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _bump_prime(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    out[inside] = np.exp(-1.0 / (1.0 - si ** 2)) * (-2 * si / (1.0 - si ** 2) ** 2)
    return out


@lru_cache(maxsize=None)
def _bump_mass() -> float:
    val, _ = integrate.quad(lambda s: math.exp(-1.0 / (1.0 - s * s)), -1, 1, epsabs=1e-14, epsrel=1e-13, limit=200)
    return val


def mollifier_kernel(s, k: int = 1, derivative: bool = False):
    """Normalized bump ``rho_k(s) = k rho(k s)`` supported on [-1/k, 1/k]."""
    z = _bump_mass()
    s = np.asarray(s, dtype=float)
    if derivative:
        return k * k * _bump_prime(k * s) / z
    return k * _bump(k * s) / z


@lru_cache(maxsize=None)
def _tanh_sinh(h: float = 1 / 16, tmax: float = 3.2):
    """Tanh-sinh nodes as fractions ``sig`` of [a, b] (and ``1 - sig``), with weights."""
    t = np.arange(-tmax, tmax + 0.5 * h, h)
    u = 0.5 * math.pi * np.sinh(t)
    sig = expit(2 * u)
    comp = expit(-2 * u)
    w = h * 2 * sig * comp * 0.5 * math.pi * np.cosh(t)
    return sig, comp, w


def _convolution_nodes(r, k, breaks):
    """Nodes ``z`` and weights on [r - 1/k, r + 1/k] split at ``breaks``.

    Returns arrays of shape (len(r), n_pieces * n_nodes).
    """
    r = np.asarray(r, dtype=float).reshape(-1)
    lo, hi = r - 1.0 / k, r + 1.0 / k
    b = np.clip(np.asarray(breaks, dtype=float)[None, :], lo[:, None], hi[:, None])
    edges = np.sort(np.concatenate([lo[:, None], b, hi[:, None]], axis=1), axis=1)
    a, c = edges[:, :-1], edges[:, 1:]
    sig, comp, w = _tanh_sinh()
    L = (c - a)[..., None]
    # nodes in the left half are offsets from a, in the right half offsets from c
    left = sig <= 0.5
    z = np.where(left, a[..., None] + L * sig, c[..., None] - L * comp)
    ww = L * w
    return z.reshape(len(r), -1), ww.reshape(len(r), -1)


def mollifier_mass(k: int = 1) -> float:
    """Numerical mass of ``rho_k`` under the convolution rule (should be 1)."""
    z, w = _convolution_nodes([0.0], k, [0.0])
    return float(np.sum(w * mollifier_kernel(0.0 - z, k)))


# --- approximations ----------------------------------------------------------

@dataclass(frozen=True)
class GraphApprox:
    """Continuous approximation ``S^k`` of a model's selection."""

    base: GraphModel
    mode: str = "exact"
    k: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown approximation mode {self.mode!r}; choose from {MODES}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be a positive integer")
        if self.mode == "affine_interp" and self.k < self.k_0:
            raise ValueError(f"affine_interp needs k >= k_0 = {self.k_0}, got k = {self.k}")

    @property
    def discontinuity_set(self) -> tuple:
        return self.base.discontinuity_set

    @property
    def k_0(self) -> int:
        a = self.discontinuity_set
        if len(a) < 2:
            return 1
        gap = min(np.diff(a))
        return int(math.floor(2.0 / gap)) + 1

    @property
    def is_smooth_everywhere(self) -> bool:
        return self.mode != "exact" or self.base.continuous

    def _odd_breaks(self):
        a = np.asarray(self.discontinuity_set)
        return np.unique(np.concatenate([-a, a]))

    def radial(self, s, t=None) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.mode == "exact":
            return self.base.radial(s, t)
        if self.mode == "affine_interp":
            return self._affine(s, t)
        z, w = _convolution_nodes(s, self.k, self._odd_breaks())
        vals = self.base.radial(z, t) * mollifier_kernel(s.reshape(-1, 1) - z, self.k)
        return np.sum(w * vals, axis=1).reshape(s.shape)

    def radial_slope(self, s, t=None) -> np.ndarray:
        """d s^k / d r; at a kink of the interpolant the right-limit slope."""
        s = np.asarray(s, dtype=float)
        if self.mode == "exact":
            return self.base.radial_slope(s, t)
        if self.mode == "affine_interp":
            out = np.array(self.base.radial_slope(s, t), dtype=float, copy=True)
            r = np.abs(s)
            for a in self.discontinuity_set:
                lo, hi = a - 1.0 / self.k, a + 1.0 / self.k
                inside = (r >= lo) & (r < hi)
                if np.any(inside):
                    vlo, vhi = self.base.radial(np.array([lo, hi]), t)
                    out[inside] = (vhi - vlo) * self.k / 2.0
            return out
        z, w = _convolution_nodes(s, self.k, self._odd_breaks())
        vals = self.base.radial(z, t) * mollifier_kernel(s.reshape(-1, 1) - z, self.k, derivative=True)
        return np.sum(w * vals, axis=1).reshape(s.shape)

    def _affine(self, s, t=None):
        k = self.k
        r = np.abs(s)
        out = np.array(self.base.radial(r, t), dtype=float, copy=True)
        for a in self.discontinuity_set:
            am, ap = a - 1.0 / k, a + 1.0 / k
            inside = (r >= am) & (r <= ap)
            if not np.any(inside):
                continue
            s_m, s_p = self.base.radial(np.array([am, ap]), t)
            B = r[inside]
            out[inside] = (0.5 * k * (s_m * ap / am - s_p) * (am - B) + s_m * B / am)
        return np.sign(s) * out

    # constants of the approximated coercivity bound
    @property
    def c_tilde(self) -> float:
        if self.mode == "exact":
            return self.base.c_star
        return 2 ** (-(self.base.q_prime - 1)) * self.base.c_star

    def g_tilde(self, t=None) -> float:
        base = self.base
        if self.mode == "exact":
            return base.g(t)
        qp = base.q_prime
        top = abs(float(base.radial(np.array(self.discontinuity_set[-1] + 1.0), t)))
        top_end = self.discontinuity_set[-1] + 1.0
        return 2 * top * top_end + base.c_star * 2 ** qp * top ** qp + base.g(t)

    def limit_constant(self, D_norm=None, B_norm=None, t=None):
        """Constant ``c`` of the graph-limit bound ``(S^k(D)-S*(B)):(D-B) >= -c/k``."""
        if self.mode == "exact":
            return 0.0
        if self.mode == "affine_interp":
            top = float(self.base.radial(np.array(self.discontinuity_set[-1] + 1.0), t))
            return 4.0 * top
        return (np.abs(self.base.radial(np.asarray(D_norm) + 1.0 / self.k, t))
                + np.abs(self.base.radial(np.asarray(B_norm), t)))


# --- tensor level ------------------------------------------------------------

def _apply_radial(law, D, t=None):
    D = np.asarray(D, dtype=float)
    r = frobenius(D)
    s = law(r, t)
    with np.errstate(invalid="ignore", divide="ignore"):
        fac = np.where(r > 0, s / np.where(r > 0, r, 1.0), 0.0)
    return fac[..., None, None] * D


def eval_selection(model: GraphModel, D, t=None) -> np.ndarray:
    """``S*(D) = s*(|D|) D/|D|`` and ``S*(0) = 0``; ``D`` has shape (..., 2, 2)."""
    return _apply_radial(model.radial, D, t)


def eval_approx(approx: GraphApprox, D, t=None) -> np.ndarray:
    return _apply_radial(approx.radial, D, t)


_R_FLOOR = 1e-12


def approx_derivative(approx: GraphApprox, D, t=None) -> np.ndarray:
    """Tangent ``C[..., i, j, k, l] = dS_ij / dD_kl`` acting on symmetric increments.

    At ``D = 0`` the isotropic operator ``s'(0+) Id`` is returned; if that
    one-sided slope is infinite (power law with q < 2 in exact mode) it is
    replaced by the secant slope at radius 1e-12.
    """
    D = np.asarray(D, dtype=float)
    r = frobenius(D)
    if approx.mode == "exact" and not approx.base.continuous:
        on_jump = np.isin(r, approx.discontinuity_set)
        if np.any(on_jump):
            raise ValueError("exact selection is discontinuous at this |D|; use an approximation")
    s = approx.radial(r, t)
    ds = approx.radial_slope(r, t)
    zero = r <= 0
    secant = np.empty_like(r)
    secant[~zero] = s[~zero] / r[~zero]
    if np.any(zero):
        d0 = approx.radial_slope(np.zeros(1), t)[0]
        if not np.isfinite(d0):
            d0 = float(approx.radial(np.array([_R_FLOOR]), t)[0]) / _R_FLOOR
        secant[zero] = d0
        ds = np.where(zero, d0, ds)
    if approx.mode == "exact" and approx.base.q < 2:
        ds = np.where(np.isfinite(ds), ds, secant)
    eye = np.eye(2)
    sym_id = 0.5 * (np.einsum("ik,jl->ijkl", eye, eye) + np.einsum("il,jk->ijkl", eye, eye))
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(zero[..., None, None], 0.0, D / np.where(zero, 1.0, r)[..., None, None])
    nn = np.einsum("...ij,...kl->...ijkl", n, n)
    return (secant[..., None, None, None, None] * sym_id
            + (ds - secant)[..., None, None, None, None] * nn)


# --- assumption battery --------------------------------------------------------

@dataclass
class BatteryReport:
    model: str
    mode: str
    k: int
    samples: int
    monotonicity_violations: int
    worst_monotonicity: float  # min over pairs of (S1-S2):(D1-D2) / (1+|D1|+|D2|)^2
    worst_coercivity: float  # min of D:S - [-g~ + c~(|D|^q + |S|^q')]
    worst_limit: float  # min of (S^k(D)-S*(B)):(D-B) + c/k
    inner_limit_margin: float  # min of (S^k(D)-S*(B)):(D-B) for |D|,|B| in the windows
    inner_limit_bound: float  # -c/k for the inner-window pairs
    c_tilde: float
    g_tilde: float

    @property
    def passed(self) -> bool:
        return (self.monotonicity_violations == 0 and self.worst_coercivity >= -1e-10
                and self.worst_limit >= -1e-10)

    def lines(self):
        return [
            f"model {self.model} mode {self.mode} k {self.k} samples {self.samples}",
            f"monotonicity violations {self.monotonicity_violations} (worst scaled margin {self.worst_monotonicity:.3e})",
            f"coercivity margin {self.worst_coercivity:.6e} (c~ {self.c_tilde:.6g}, g~ {self.g_tilde:.6g})",
            f"graph-limit margin {self.worst_limit:.6e} (inner windows {self.inner_limit_margin:.3e} >= {self.inner_limit_bound:.3e})",
        ]


def _random_sym(rng, radii):
    A = rng.standard_normal((len(radii), 2, 2))
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    A /= frobenius(A)[:, None, None]
    return A * np.asarray(radii)[:, None, None]


def _sample_radii(rng, n, approx: GraphApprox):
    a = np.asarray(approx.discontinuity_set)
    top = a[-1] + 2.0
    k = approx.k
    parts = [rng.uniform(0.0, top, n - 2 * (n // 3)),
             rng.uniform(0.0, 3 * top, n // 3)]
    centers = rng.choice(a, n // 3)
    parts.append(np.abs(centers + rng.uniform(-1.5 / k, 1.5 / k, n // 3)))
    r = np.concatenate(parts)
    rng.shuffle(r)
    return r


def check_assumption_battery(approx: GraphApprox, sample_count: int = 1000, rng_seed: int = 0) -> BatteryReport:
    """Sampled checks of monotonicity, coercivity and the graph-limit inequality.

    Findings are reported, never raised.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = int(sample_count)
    base = approx.base
    q, qp, k = base.q, base.q_prime, approx.k
    times = [None] if base.autonomous else list(rng.uniform(0.0, 1.0, 4))
    n_t = len(times)
    worst_mono = math.inf
    violations = 0
    worst_coer = math.inf
    worst_lim = math.inf
    inner_margin = math.inf
    inner_bound = 0.0
    g_t = 0.0
    for t in times:
        m = max(1, n // n_t)
        D1 = _random_sym(rng, _sample_radii(rng, m, approx))
        D2 = _random_sym(rng, _sample_radii(rng, m, approx))
        # nearby pairs probe local monotonicity
        near = rng.random(m) < 0.3
        D2[near] = D1[near] + _random_sym(rng, rng.uniform(0, 2.0 / k, near.sum()))
        S1, S2 = eval_approx(approx, D1, t), eval_approx(approx, D2, t)
        n1, n2 = frobenius(D1), frobenius(D2)
        mono = np.einsum("nij,nij->n", S1 - S2, D1 - D2)
        scaled = mono / (1 + n1 + n2) ** 2
        violations += int(np.sum(scaled < -1e-12))
        worst_mono = min(worst_mono, float(scaled.min()))

        g_t = approx.g_tilde(t)
        c_t = approx.c_tilde
        DS = np.einsum("nij,nij->n", D1, S1)
        coer = DS - (-g_t + c_t * (n1 ** q + frobenius(S1) ** qp))
        worst_coer = min(worst_coer, float(coer.min()))

        B = D2
        SB = eval_selection(base, B, t)
        lim = np.einsum("nij,nij->n", S1 - SB, D1 - B)
        c = approx.limit_constant(n1, frobenius(B), t)
        worst_lim = min(worst_lim, float(np.min(lim + np.asarray(c) / k)))

        # both arguments inside the same window around a discontinuity
        centers = rng.choice(np.asarray(approx.discontinuity_set), m)
        rD = np.abs(centers + rng.uniform(-1.0 / k, 1.0 / k, m))
        rB = np.abs(centers + rng.uniform(-1.0 / k, 1.0 / k, m))
        Di, Bi = _random_sym(rng, rD), _random_sym(rng, rB)
        li = np.einsum("nij,nij->n", eval_approx(approx, Di, t) - eval_selection(base, Bi, t), Di - Bi)
        ci = np.asarray(approx.limit_constant(rD, rB, t)) / k
        inner_margin = min(inner_margin, float(li.min()))
        inner_bound = min(inner_bound, float(-np.max(ci)))
        worst_lim = min(worst_lim, float(np.min(li + ci)))
    return BatteryReport(base.name, approx.mode, k, n, violations, worst_mono, worst_coer,
                         worst_lim, inner_margin, inner_bound, approx.c_tilde, g_t)
