"""Fully discrete scheme: assembly of the step residual and the step solver.

Unknowns of one time step are stored as ``x = [U_free, lambda, mu]``: the
velocity on non-boundary dofs, a pressure-space multiplier enforcing the
discrete divergence constraint, and a scalar fixing the multiplier's mean.
The discretely divergence-free subspace is never built explicitly.

Step equation, tested with every velocity basis function W::

    (1/delta) <U - U_prev, W> + bt(U, U, W) + <S^k_i(DU), DW>
        + (1/m) <|U|^{2q'-2} U, W> - <f_i, W> + <lambda, div W> = 0
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .femspace import DiscreteField, MixedSpace, project_Pn_div
from .quadrature import gauss_legendre
from .rheology import ExponentPack, GraphApprox, approx_derivative, eval_approx, exponents
from .timegrid import StateHistory, TimeGrid

__all__ = [
    "ProblemSetup",
    "SolverConfig",
    "StepResidual",
    "StepStats",
    "StepFailure",
    "SimulationFailure",
    "form_b",
    "form_b_tilde",
    "assemble_residual",
    "assemble_jacobian",
    "forcing_load",
    "step_energy_terms",
    "trust_radius",
    "solve_step",
    "run_simulation",
]


def _zero_field(x):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class ProblemSetup:
    """Discretization and data of one run.

    ``forcing(t, X)`` and ``initial(X)`` take points of shape (N, 2) and
    return vectors of shape (N, 2).  ``m = inf`` drops the regularization.
    """

    space: MixedSpace
    approx: GraphApprox
    grid: TimeGrid
    m: float = 1.0
    forcing: Callable = field(default=lambda t, X: _zero_field(X))
    initial: Callable = field(default=_zero_field)
    quad_points: int = 4

    def __post_init__(self):
        if not self.m >= 1:
            raise ValueError("m must be >= 1 (or inf)")
        if self.quad_points < 1:
            raise ValueError("quad_points must be >= 1")
        if self.approx.mode == "exact" and not self.approx.base.continuous:
            raise ValueError("exact mode needs a continuous law; choose mollify or affine_interp")
        if not self.exponents.above_critical:
            warnings.warn(f"q = {self.q} <= 2d/(d+2); the convergence theory does not cover this case",
                          stacklevel=2)

    @property
    def q(self) -> float:
        return self.approx.base.q

    @property
    def exponents(self) -> ExponentPack:
        return exponents(self.q, 2)

    @property
    def penalty_power(self) -> float:
        return 2 * self.exponents.q_prime

    @property
    def inv_m(self) -> float:
        return 0.0 if math.isinf(self.m) else 1.0 / self.m

    def stress_times(self, i: int):
        """Time nodes and normalized weights averaging the law over step ``i``."""
        if self.approx.base.autonomous:
            return [None], np.ones(1)
        a, b = self.grid.interval(i)
        ts, ws = gauss_legendre(self.quad_points, a, b)
        return list(ts), ws / (b - a)

    def with_(self, **changes) -> "ProblemSetup":
        kw = dict(space=self.space, approx=self.approx, grid=self.grid, m=self.m,
                  forcing=self.forcing, initial=self.initial, quad_points=self.quad_points)
        kw.update(changes)
        return ProblemSetup(**kw)


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-10
    max_newton: int = 30
    min_step: float = 2.0 ** -12
    picard_fallback: bool = True
    max_picard: int = 400
    picard_burst: int = 8
    use_trust_radius: bool = True

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.max_newton < 1 or self.max_picard < 0 or self.picard_burst < 1:
            raise ValueError("iteration limits must be positive")
        if not 0 < self.min_step <= 1:
            raise ValueError("min_step must lie in (0, 1]")


@dataclass
class StepResidual:
    x: np.ndarray  # [U_free, lambda, mu]
    U: DiscreteField
    multiplier: np.ndarray
    value: np.ndarray  # residual rows in the layout of x
    momentum: np.ndarray  # momentum residual on all velocity dofs

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.value))

    @property
    def divergence_rows(self) -> np.ndarray:
        nf = len(self.U.space.free_dofs)
        return self.value[nf: nf + self.U.space.n_pressure]


@dataclass
class StepStats:
    step: int
    newton_iterations: int = 0
    picard_iterations: int = 0
    residual_history: list = field(default_factory=list)
    initial_residual: float = 0.0
    final_residual: float = 0.0
    trust_radius: float = math.inf
    wall_clock: float = 0.0


class StepFailure(RuntimeError):
    def __init__(self, message, step, residual, iterate):
        super().__init__(message)
        self.step = step
        self.residual = residual
        self.iterate = iterate


class SimulationFailure(RuntimeError):
    def __init__(self, message, states, stats, cause):
        super().__init__(message)
        self.states = states
        self.stats = stats
        self.cause = cause


# --- trilinear forms ---------------------------------------------------------

def _check_same_space(*fields):
    sp0 = fields[0].space
    for f in fields:
        if f.space is not sp0 or f.kind != "velocity":
            raise ValueError("all arguments must be velocity fields on the same space")
    return sp0


def form_b(space: MixedSpace, u: DiscreteField, v: DiscreteField, w: DiscreteField) -> float:
    """``b(u, v, w) = -int (u (x) v) : grad w``."""
    _check_same_space(u, v, w)
    uu, vv, gw = u.values(), v.values(), w.gradients()
    return float(-np.einsum("kq,kqa,kqb,kqab->", space.qweights, uu, vv, gw))


def form_b_tilde(space: MixedSpace, u: DiscreteField, v: DiscreteField, w: DiscreteField) -> float:
    """``bt(u, v, w) = (<u (x) w, grad v> - <u (x) v, grad w>) / 2``."""
    _check_same_space(u, v, w)
    uu, vv, ww = u.values(), v.values(), w.values()
    gv, gw = v.gradients(), w.gradients()
    a = np.einsum("kq,kqa,kqb,kqab->", space.qweights, uu, ww, gv)
    b = np.einsum("kq,kqa,kqb,kqab->", space.qweights, uu, vv, gw)
    return float(0.5 * (a - b))


# --- assembly kernels ----------------------------------------------------------

def _sym(g):
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def _stress(setup: ProblemSetup, D, i, tangent=False):
    """Time-averaged ``S^k_i(D)`` (and its tangent) for D of shape (..., 2, 2)."""
    ts, ws = setup.stress_times(i)
    S = 0.0
    C = 0.0 if tangent else None
    for t, w in zip(ts, ws):
        S = S + w * eval_approx(setup.approx, D, t)
        if tangent:
            C = C + w * approx_derivative(setup.approx, D, t)
    return S, C


def _secant_viscosity(setup: ProblemSetup, D, i):
    ts, ws = setup.stress_times(i)
    r = np.sqrt(np.einsum("...ij,...ij->...", D, D))
    rr = np.maximum(r, 1e-12)
    nu = 0.0
    for t, w in zip(ts, ws):
        nu = nu + w * setup.approx.radial(rr, t) / rr
    return nu


def _scatter(space: MixedSpace, loc):
    out = np.zeros(space.n_velocity)
    np.add.at(out, space.velocity_local_dofs.ravel(), loc.reshape(space.mesh.n_cells, -1).ravel())
    return out


_FORCING_CACHE: dict = {}


def forcing_load(setup: ProblemSetup, i: int) -> np.ndarray:
    """``(<f_i, W_j>)_j`` with ``f_i`` the Gauss-Legendre average over step ``i``."""
    key = (id(setup), i)
    hit = _FORCING_CACHE.get(key)
    if hit is not None and hit[0] is setup:
        return hit[1]
    space = setup.space
    X = space.qpoints.reshape(-1, 2)
    a, b = setup.grid.interval(i)
    ts, ws = gauss_legendre(setup.quad_points, a, b)
    vals = 0.0
    try:
        for t, w in zip(ts, ws):
            vals = vals + (w / (b - a)) * np.asarray(setup.forcing(t, X), dtype=float)
    except Exception as exc:
        raise RuntimeError(f"forcing evaluation failed in step {i}: {exc}") from exc
    vals = np.broadcast_to(vals, X.shape).reshape(space.qpoints.shape)
    load = space.load_velocity(vals)
    if len(_FORCING_CACHE) > 4096:
        _FORCING_CACHE.clear()
    _FORCING_CACHE[key] = (setup, load)
    return load


def _forcing_values(setup: ProblemSetup, i: int):
    space = setup.space
    X = space.qpoints.reshape(-1, 2)
    a, b = setup.grid.interval(i)
    ts, ws = gauss_legendre(setup.quad_points, a, b)
    vals = 0.0
    for t, w in zip(ts, ws):
        vals = vals + (w / (b - a)) * np.asarray(setup.forcing(t, X), dtype=float)
    return np.broadcast_to(vals, X.shape).reshape(space.qpoints.shape)


def _momentum(setup: ProblemSetup, U: np.ndarray, U_prev: np.ndarray, i: int, convection=True):
    space = setup.space
    w = space.qweights
    u, g = space.eval_velocity(U)
    D = _sym(g)
    S, _ = _stress(setup, D, i)
    phi, dphi = space.phi, space.dphi
    loc = np.einsum("kq,kqac,kqba->kcb", w, S, dphi, optimize=True)
    if convection:
        adv = np.einsum("kqa,kqac->kqc", u, g, optimize=True)
        udphi = np.einsum("kqa,kqba->kqb", u, dphi, optimize=True)
        loc += 0.5 * (np.einsum("kq,qb,kqc->kcb", w, phi, adv, optimize=True)
                      - np.einsum("kq,kqc,kqb->kcb", w, u, udphi, optimize=True))
    if setup.inv_m:
        p = setup.penalty_power
        nrm = np.sqrt(np.sum(u * u, axis=2))
        loc += setup.inv_m * np.einsum("kq,kq,kqc,qb->kcb", w, nrm ** (p - 2), u, phi)
    r = _scatter(space, loc)
    r += space.velocity_mass @ (U - U_prev) / setup.grid.delta
    r -= forcing_load(setup, i)
    return r


def _full_vector(space, U_free):
    U = np.zeros(space.n_velocity)
    U[space.free_dofs] = U_free
    return U


def _split(space, x):
    nf = len(space.free_dofs)
    return x[:nf], x[nf: nf + space.n_pressure], x[nf + space.n_pressure]


def assemble_residual(setup: ProblemSetup, U_prev, alpha, i: int) -> StepResidual:
    """Residual of step ``i`` at ``alpha`` (layout ``[U_free, lambda, mu]``, or a
    full velocity vector / :class:`DiscreteField`, with zero multiplier)."""
    if not 1 <= i <= setup.grid.l:
        raise ValueError(f"step index {i} outside 1..{setup.grid.l}")
    space = setup.space
    Up = U_prev.coefficients if isinstance(U_prev, DiscreteField) else np.asarray(U_prev, float)
    nf, npr = len(space.free_dofs), space.n_pressure
    if isinstance(alpha, DiscreteField):
        alpha = alpha.coefficients
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape == (space.n_velocity,):
        x = np.concatenate([alpha[space.free_dofs], np.zeros(npr + 1)])
    elif alpha.shape == (nf + npr + 1,):
        x = alpha
    else:
        raise ValueError("alpha has the wrong length")
    U_free, lam, mu = _split(space, x)
    U = _full_vector(space, U_free)
    r = _momentum(setup, U, Up, i)
    r += space.div_matrix.T @ lam
    B = space.div_matrix_free
    c = space.pressure_mean
    value = np.concatenate([r[space.free_dofs], B @ U_free + c * mu, [c @ lam]])
    return StepResidual(x, DiscreteField(space, "velocity", U), lam, value, r)


_EYE = np.eye(2)
_SYM_ID = 0.5 * (np.einsum("ik,jl->ijkl", _EYE, _EYE) + np.einsum("il,jk->ijkl", _EYE, _EYE))


def _local_jacobian(setup, U, i, newton=True):
    """Cell blocks (nc, 2nb, 2nb) of the (linearized) momentum operator."""
    space = setup.space
    w = space.qweights
    u, g = space.eval_velocity(U)
    D = _sym(g)
    phi, dphi = space.phi, space.dphi
    nc, nb = space.mesh.n_cells, phi.shape[1]
    if newton:
        _, C = _stress(setup, D, i, tangent=True)
    else:
        nu = _secant_viscosity(setup, D, i)
        C = nu[..., None, None, None, None] * _SYM_ID
    nq = w.shape[1]
    T = np.einsum("kqacme,kqba->kqcbme", C * w[..., None, None, None, None], dphi)
    # contract over (q, m) as a batched matrix product
    X = T.transpose(0, 2, 3, 5, 1, 4).reshape(nc, 4 * nb, 2 * nq)
    Y = dphi.transpose(0, 1, 3, 2).reshape(nc, 2 * nq, nb)
    J = (X @ Y).reshape(nc, 2, nb, 2, nb)
    udphi = np.einsum("kqa,kqba->kqb", u, dphi, optimize=True)
    eye = np.eye(2)
    # convection: lagged advecting field in both variants
    adv = np.einsum("qb,kqf->kbf", phi, 0.5 * w[..., None] * udphi)
    adv -= np.swapaxes(adv, 1, 2)
    J += np.einsum("ce,kbf->kcbef", eye, adv)
    if newton:
        pp = np.einsum("qb,qf->qbf", phi, phi)
        J += 0.5 * np.einsum("qbf,kqec->kcbef", pp, g * w[..., None, None], optimize=True)
        J -= 0.5 * np.einsum("kqc,qf,kqbe->kcbef", u * w[..., None], phi, dphi, optimize=True)
    if setup.inv_m:
        p = setup.penalty_power
        nrm = np.sqrt(np.sum(u * u, axis=2))
        a = nrm ** (p - 2)
        P = a[..., None, None] * eye
        if newton:
            with np.errstate(invalid="ignore", divide="ignore"):
                uh = np.where(nrm[..., None] > 0, u / np.where(nrm > 0, nrm, 1.0)[..., None], 0.0)
            P = P + ((p - 2) * a)[..., None, None] * np.einsum("kqc,kqe->kqce", uh, uh, optimize=True)
        J += setup.inv_m * np.einsum("kq,kqce,qb,qf->kcbef", w, P, phi, phi, optimize=True)
    return J.reshape(nc, 2 * nb, 2 * nb)


def assemble_jacobian(setup: ProblemSetup, U, i: int, newton: bool = True) -> sp.csr_matrix:
    """Momentum Jacobian (``newton``) or Picard operator on all velocity dofs."""
    space = setup.space
    U = U.coefficients if isinstance(U, DiscreteField) else np.asarray(U, float)
    d = space.velocity_local_dofs
    K = space.assemble(_local_jacobian(setup, U, i, newton), d, d, (space.n_velocity,) * 2)
    return (K + space.velocity_mass / setup.grid.delta).tocsr()


def _saddle_solve(space, A_full, rhs):
    f = space.free_dofs
    B = space.div_matrix_free
    c = sp.csr_matrix(space.pressure_mean.reshape(-1, 1))
    K = sp.bmat([[A_full[f][:, f], B.T, None], [B, None, c], [None, c.T, None]], format="csc")
    x = spla.splu(K).solve(rhs)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("non-finite solution of the linearized step system")
    return x


# --- energy bookkeeping ---------------------------------------------------------

def step_energy_terms(setup: ProblemSetup, U, U_prev, i: int) -> dict:
    """Quadrature values of the terms of the discrete energy identity of step ``i``."""
    space = setup.space
    U = U.coefficients if isinstance(U, DiscreteField) else np.asarray(U, float)
    Up = U_prev.coefficients if isinstance(U_prev, DiscreteField) else np.asarray(U_prev, float)
    w = space.qweights
    delta = setup.grid.delta
    u, g = space.eval_velocity(U)
    up, _ = space.eval_velocity(Up)
    D = _sym(g)
    S, _ = _stress(setup, D, i)
    q, qp = setup.q, setup.exponents.q_prime
    p = setup.penalty_power
    nu = np.sqrt(np.sum(u * u, axis=2))
    nS = np.sqrt(np.einsum("kqab,kqab->kq", S, S))
    ng = np.sqrt(np.einsum("kqab,kqab->kq", g, g))
    kin = float(np.sum(w * nu ** 2))
    kin_prev = float(np.sum(w * np.sum(up * up, axis=2)))
    inc = float(np.sum(w * np.sum((u - up) ** 2, axis=2)))
    dt_term = float(np.sum(w * np.sum((u - up) * u, axis=2))) / delta
    diss = float(np.sum(w * np.einsum("kqab,kqab->kq", S, D)))
    pen = setup.inv_m * float(np.sum(w * nu ** p))
    fU = float(forcing_load(setup, i) @ U)
    residual = dt_term + diss + pen - fU
    scale = (kin + kin_prev) / delta + abs(diss) + abs(pen) + abs(fU)
    return dict(
        kinetic=kin,
        kinetic_prev=kin_prev,
        increment=inc,
        dt_term=dt_term,
        dissipation=diss,
        penalty=pen,
        forcing_work=fU,
        identity_residual=residual,
        identity_scale=scale,
        w1q=float(np.sum(w * (nu ** q + ng ** q))),
        grad_q=float(np.sum(w * ng ** q)),
        sym_grad_q=float(np.sum(w * np.sqrt(np.einsum("kqab,kqab->kq", D, D)) ** q)),
        stress_qp=float(np.sum(w * nS ** qp)),
        penalty_norm=float(np.sum(w * nu ** p)),
    )


def trust_radius(setup: ProblemSetup, U_prev, i: int) -> float:
    """Bound on ``||U_i||_{L^2}`` implied by the step's energy identity (doubled)."""
    space = setup.space
    Up = U_prev.coefficients if isinstance(U_prev, DiscreteField) else np.asarray(U_prev, float)
    w = space.qweights
    delta = setup.grid.delta
    fv = _forcing_values(setup, i)
    f_l2 = math.sqrt(float(np.sum(w * np.sum(fv * fv, axis=2))))
    up, _ = space.eval_velocity(Up)
    up_l2 = math.sqrt(float(np.sum(w * np.sum(up * up, axis=2))))
    ts, ws = setup.stress_times(i)
    area = float(np.sum(w))
    g_l1 = area * sum(wt * setup.approx.g_tilde(t) for t, wt in zip(ts, ws))
    a = delta * f_l2
    return 2.0 * (a + math.sqrt(a * a + up_l2 ** 2 + 2 * delta * g_l1)) + 1e-12


# --- step solver ----------------------------------------------------------------

def _l2(space, U_full):
    return math.sqrt(max(float(U_full @ (space.velocity_mass @ U_full)), 0.0))


def solve_step(setup: ProblemSetup, U_prev, i: int, config: SolverConfig = SolverConfig(),
               stats: Optional[StepStats] = None, guess=None) -> DiscreteField:
    """Solve step ``i`` from ``U_prev`` by damped Newton with Picard bursts.

    Stops once ``||F(x)|| <= newton_tol (1 + ||F(0)||)``.  Raises
    :class:`StepFailure` with the last iterate when this is not reached.
    """
    space = setup.space
    if not isinstance(U_prev, DiscreteField):
        U_prev = DiscreteField(space, "velocity", np.asarray(U_prev, float))
    Up = U_prev.coefficients
    stats = stats if stats is not None else StepStats(i)
    nf, npr = len(space.free_dofs), space.n_pressure
    zero = np.zeros(nf + npr + 1)
    F0 = assemble_residual(setup, Up, zero, i).norm
    target = config.newton_tol * (1.0 + F0)
    R = trust_radius(setup, Up, i) if config.use_trust_radius else math.inf
    stats.initial_residual, stats.trust_radius = F0, R

    x = zero.copy()
    start = Up if guess is None else (guess.coefficients if isinstance(guess, DiscreteField) else guess)
    x[:nf] = np.asarray(start, float)[space.free_dofs]
    res = assemble_residual(setup, Up, x, i)
    if res.norm > F0:
        x, res = zero.copy(), assemble_residual(setup, Up, zero, i)
    stats.residual_history.append(res.norm)

    def inside(r):
        return _l2(space, r.U.coefficients) <= R

    picard_left = config.max_picard if config.picard_fallback else 0
    while res.norm > target:
        while res.norm > target and stats.newton_iterations < config.max_newton:
            stats.newton_iterations += 1
            try:
                J = assemble_jacobian(setup, res.U.coefficients, i, newton=True)
                dx = _saddle_solve(space, J, -res.value)
            except (RuntimeError, np.linalg.LinAlgError):
                break
            t, trial = 1.0, None
            while t >= config.min_step:
                cand = assemble_residual(setup, Up, x + t * dx, i)
                if np.isfinite(cand.norm) and cand.norm <= (1 - 1e-4 * t) * res.norm and inside(cand):
                    trial = cand
                    break
                t *= 0.5
            if trial is None:
                break
            x, res = trial.x, trial
            stats.residual_history.append(res.norm)
        if res.norm <= target or picard_left <= 0:
            break
        # Picard burst: lagged convection, secant viscosity and secant penalty
        rhs = np.concatenate([(space.velocity_mass @ Up / setup.grid.delta
                               + forcing_load(setup, i))[space.free_dofs], np.zeros(npr + 1)])
        for _ in range(min(config.picard_burst, picard_left)):
            picard_left -= 1
            stats.picard_iterations += 1
            try:
                A = assemble_jacobian(setup, res.U.coefficients, i, newton=False)
                trial = assemble_residual(setup, Up, _saddle_solve(space, A, rhs), i)
            except (RuntimeError, np.linalg.LinAlgError):
                picard_left = 0
                break
            if not np.isfinite(trial.norm):
                picard_left = 0
                break
            x, res = trial.x, trial
            stats.residual_history.append(res.norm)
            if res.norm <= target:
                break
        # give Newton a fresh budget from the Picard iterate
        stats.newton_iterations = min(stats.newton_iterations, config.max_newton - 5)
    stats.final_residual = res.norm
    if res.norm > target:
        raise StepFailure(
            f"step {i}: residual {res.norm:.3e} above target {target:.3e} after "
            f"{stats.newton_iterations} Newton and {stats.picard_iterations} Picard iterations",
            i, res.norm, res.U)
    return res.U


def run_simulation(setup: ProblemSetup, config: SolverConfig = SolverConfig(), audit: bool = True):
    """March all steps from ``U_0 = P_div u_0``.

    Returns ``(history, report)``.  On a failed step raises
    :class:`SimulationFailure` carrying the states computed so far.
    """
    from .diagnostics import build_report

    space = setup.space
    U = project_Pn_div(space, setup.initial)
    states = [U.coefficients]
    all_stats = []
    for i in range(1, setup.grid.l + 1):
        st = StepStats(i)
        t0 = time.perf_counter()
        try:
            U = solve_step(setup, U, i, config, st)
        except StepFailure as exc:
            st.wall_clock = time.perf_counter() - t0
            all_stats.append(st)
            raise SimulationFailure(str(exc), states, all_stats, exc) from exc
        st.wall_clock = time.perf_counter() - t0
        all_stats.append(st)
        states.append(U.coefficients)
    history = StateHistory(setup.grid, states)
    report = build_report(history, setup, all_stats, config) if audit else None
    return history, report
