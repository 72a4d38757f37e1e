"""Post-hoc checks of discrete runs and parameter sweeps.

Everything here consumes completed histories; nothing feeds back into the
solver.  CSV files carry a schema line and exclude wall-clock columns so
identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .femspace import build_space, evaluate_velocity
from .meshkit import refine_uniform
from .quadrature import gauss_legendre
from .rheology import GraphApprox, eval_selection
from .scheme import (ProblemSetup, SimulationFailure, SolverConfig, _stress, _sym,
                     run_simulation, step_energy_terms)
from .timegrid import StateHistory, TimeGrid

__all__ = [
    "RUN_SCHEMA",
    "SWEEP_SCHEMA",
    "APRIORI_KEYS",
    "RunReport",
    "SweepTable",
    "EnergyAudit",
    "energy_audit",
    "apriori_quantities",
    "parabolic_interpolation_ratio",
    "minty_monitor",
    "stress_duality_margin",
    "weak_residual_proxy",
    "history_difference",
    "error_against",
    "convergence_sweep",
    "build_report",
]

RUN_SCHEMA = "implicitflow-run-v1"
SWEEP_SCHEMA = "implicitflow-sweep-v1"
APRIORI_KEYS = ("max_kinetic", "sum_increment", "w1q_dissipation", "stress_norm", "penalty")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def _write_csv(schema, columns, rows, path=None) -> str:
    buf = io.StringIO()
    buf.write(f"# schema {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


# --- energy -----------------------------------------------------------------------

@dataclass
class EnergyAudit:
    identity_residuals: np.ndarray  # per step i = 1..l
    identity_scales: np.ndarray
    inequality_slack: np.ndarray  # per node j = 0..l
    slack_tolerance: np.ndarray  # accumulated |identity residual| * delta
    terms: list  # per-step dicts from step_energy_terms

    @property
    def max_relative_residual(self) -> float:
        if not len(self.identity_residuals):
            return 0.0
        return float(np.max(np.abs(self.identity_residuals) / np.maximum(self.identity_scales, 1e-300)))

    @property
    def inequality_holds(self) -> bool:
        return bool(np.all(self.inequality_slack >= -self.slack_tolerance - 1e-12))


def energy_audit(history: StateHistory, setup: ProblemSetup) -> EnergyAudit:
    """Per-step identity residuals and the energy inequality slack at every node.

    At node ``t_j`` the slack is the right minus the left side of::

        |U_j|^2/2 + delta sum_i <S_i, DU_i> + delta/m sum_i |U_i|_{2q'}^{2q'}
            <= delta sum_i <f_i, U_i> + |U_0|^2/2

    which equals half the summed squared increments minus the accumulated
    identity residuals.
    """
    l = history.grid.l
    delta = history.grid.delta
    terms = [step_energy_terms(setup, history[i], history[i - 1], i) for i in range(1, l + 1)]
    res = np.array([t["identity_residual"] for t in terms])
    scales = np.array([t["identity_scale"] for t in terms])
    kin0 = float(history[0] @ (setup.space.velocity_mass @ history[0]))
    slack = np.zeros(l + 1)
    tol = np.zeros(l + 1)
    lhs_acc = rhs_acc = 0.0
    for j, t in enumerate(terms, start=1):
        lhs_acc += delta * (t["dissipation"] + t["penalty"])
        rhs_acc += delta * t["forcing_work"]
        slack[j] = (rhs_acc + 0.5 * kin0) - (0.5 * t["kinetic"] + lhs_acc)
        tol[j] = tol[j - 1] + delta * abs(t["identity_residual"])
    return EnergyAudit(res, scales, slack, tol, terms)


def apriori_quantities(history: StateHistory, setup: ProblemSetup, audit: Optional[EnergyAudit] = None) -> dict:
    """The five left-hand quantities of the a-priori estimate."""
    audit = audit or energy_audit(history, setup)
    delta = history.grid.delta
    T = audit.terms
    kin = [float(history[0] @ (setup.space.velocity_mass @ history[0]))] + [t["kinetic"] for t in T]
    return dict(
        max_kinetic=max(kin),
        sum_increment=sum(t["increment"] for t in T),
        w1q_dissipation=delta * sum(t["w1q"] for t in T),
        stress_norm=delta * sum(t["stress_qp"] for t in T),
        penalty=setup.inv_m * delta * sum(t["penalty_norm"] for t in T),
    )


def parabolic_interpolation_ratio(history: StateHistory, setup: ProblemSetup) -> float:
    """``int_Q |U|^{q(d+2)/d} / (|U|^q_{L^q(W^{1,q})} |U|^{2q/d}_{L^inf(L^2)})`` for the
    piecewise constant interpolant (d = 2); 0 for an identically zero run."""
    q = setup.q
    if not q > 1:
        raise ValueError("q must exceed 1")
    d = 2
    r = q * (d + 2) / d
    space = setup.space
    w = space.qweights
    delta = history.grid.delta
    num = w1q = 0.0
    linf = 0.0
    for i in range(1, history.grid.l + 1):
        u, g = space.eval_velocity(history[i])
        nu = np.sqrt(np.sum(u * u, axis=2))
        ng = np.sqrt(np.einsum("kqab,kqab->kq", g, g))
        num += delta * float(np.sum(w * nu ** r))
        w1q += delta * float(np.sum(w * (nu ** q + ng ** q)))
        linf = max(linf, math.sqrt(float(np.sum(w * nu ** 2))))
    den = w1q * linf ** (2 * q / d)
    if den == 0.0:
        return 0.0
    return num / den


def stress_duality_margin(history: StateHistory, setup: ProblemSetup) -> float:
    """Space-time margin of the approximated coercivity bound, divided by its scale."""
    space = setup.space
    w = space.qweights
    delta = history.grid.delta
    approx = setup.approx
    q, qp = setup.q, setup.exponents.q_prime
    lhs = dq = sq = g_l1 = 0.0
    area = float(np.sum(w))
    for i in range(1, history.grid.l + 1):
        _, g = space.eval_velocity(history[i])
        D = _sym(g)
        S, _ = _stress(setup, D, i)
        lhs += delta * float(np.sum(w * np.einsum("kqab,kqab->kq", S, D)))
        dq += delta * float(np.sum(w * np.sqrt(np.einsum("kqab,kqab->kq", D, D)) ** q))
        sq += delta * float(np.sum(w * np.sqrt(np.einsum("kqab,kqab->kq", S, S)) ** qp))
        ts, ws = setup.stress_times(i)
        g_l1 += delta * area * sum(wt * approx.g_tilde(t) for t, wt in zip(ts, ws))
    margin = lhs - (-g_l1 + approx.c_tilde * (dq + sq))
    return margin / (1.0 + abs(lhs) + g_l1 + dq + sq)


# --- Minty monitor ---------------------------------------------------------------

def minty_monitor(history_a: StateHistory, history_b: Optional[StateHistory], setup: ProblemSetup,
                  probes: Sequence, weights: Optional[Callable] = None, setup_b: Optional[ProblemSetup] = None):
    """``int_Q (S^k(DU) - S*(B)) : (DU - B) phi dz`` for every probe tensor ``B``.

    ``weights(t, X)`` is the nonnegative test weight (default 1).  Returns an
    array of shape (n_histories, n_probes).
    """
    out = []
    pairs = [(history_a, setup)]
    if history_b is not None:
        pairs.append((history_b, setup_b or setup))
    probes = [np.asarray(B, dtype=float) for B in probes]
    for hist, st in pairs:
        space = st.space
        w = space.qweights
        X = space.qpoints.reshape(-1, 2)
        delta = hist.grid.delta
        row = np.zeros(len(probes))
        for i in range(1, hist.grid.l + 1):
            _, g = space.eval_velocity(hist[i])
            D = _sym(g)
            S, _ = _stress(st, D, i)
            a, b = hist.grid.interval(i)
            if weights is None:
                phi = np.ones(w.shape)
            else:
                tg, wg = gauss_legendre(2, a, b)
                phi = sum(wt / (b - a) * np.asarray(weights(t, X), float) for t, wt in zip(tg, wg))
                phi = np.broadcast_to(phi, (X.shape[0],)).reshape(w.shape)
            ts, ws = st.stress_times(i)
            for j, B in enumerate(probes):
                SB = sum(wt * eval_selection(st.approx.base, B, t) for t, wt in zip(ts, ws))
                val = np.einsum("kqab,kqab->kq", S - SB, D - B)
                row[j] += delta * float(np.sum(w * phi * val))
        out.append(row)
    return np.array(out)


# --- weak-form proxy ----------------------------------------------------------------

def _test_fields(count=20):
    """Smooth solenoidal fields ``curl(s_a(x) s_b(y))`` with s_n = sin(n pi x) sin(pi x)."""
    modes = [(a, b) for a in range(1, 6) for b in range(1, 6)][:count]

    def make(a, b):
        def psi_parts(x, n):
            s = np.sin(n * np.pi * x) * np.sin(np.pi * x)
            ds = n * np.pi * np.cos(n * np.pi * x) * np.sin(np.pi * x) + np.pi * np.sin(n * np.pi * x) * np.cos(np.pi * x)
            d2 = (-(n * np.pi) ** 2 * np.sin(n * np.pi * x) * np.sin(np.pi * x)
                  + 2 * n * np.pi ** 2 * np.cos(n * np.pi * x) * np.cos(np.pi * x)
                  - np.pi ** 2 * np.sin(n * np.pi * x) * np.sin(np.pi * x))
            return s, ds, d2

        def field(X):
            x, y = X[..., 0], X[..., 1]
            sx, dsx, d2x = psi_parts(x, a)
            sy, dsy, d2y = psi_parts(y, b)
            v = np.stack([sx * dsy, -dsx * sy], axis=-1)
            # grad[..., i, j] = d_i v_j
            g = np.empty(X.shape[:-1] + (2, 2))
            g[..., 0, 0] = dsx * dsy
            g[..., 1, 0] = sx * d2y
            g[..., 0, 1] = -d2x * sy
            g[..., 1, 1] = -dsx * dsy
            return v, g
        return field
    return [make(a, b) for a, b in modes]


def weak_residual_proxy(history: StateHistory, setup: ProblemSetup, count: int = 20) -> np.ndarray:
    """Residual of the discrete weak form against smooth solenoidal test fields.

    The tests are ``psi_j(x) cos(pi t / T)``; they are not discrete functions,
    so this measures consistency only and vanishes in the limit.
    """
    space = setup.space
    w = space.qweights
    X = space.qpoints
    grid = history.grid
    delta = grid.delta
    out = []
    fields = [f(X) for f in _test_fields(count)]
    cache = []
    for i in range(1, grid.l + 1):
        u, g = space.eval_velocity(history[i])
        up, _ = space.eval_velocity(history[i - 1])
        S, _ = _stress(setup, _sym(g), i)
        fx = _time_avg_forcing(setup, i)
        cache.append((u, g, up, S, fx))
    for v, gv in fields:
        total = 0.0
        for i, (u, g, up, S, fx) in enumerate(cache, start=1):
            t = grid.node(i)
            theta = math.cos(math.pi * t / grid.T)
            integrand = (np.einsum("kqc,kqc->kq", (u - up) / delta, v)
                         + 0.5 * (np.einsum("kqa,kqb,kqab->kq", u, v, g) - np.einsum("kqa,kqb,kqab->kq", u, u, gv))
                         + np.einsum("kqab,kqab->kq", S, _sym(gv))
                         - np.einsum("kqc,kqc->kq", fx, v))
            if setup.inv_m:
                nu = np.sqrt(np.sum(u * u, axis=2))
                integrand += setup.inv_m * nu ** (setup.penalty_power - 2) * np.einsum("kqc,kqc->kq", u, v)
            total += delta * theta * float(np.sum(w * integrand))
        out.append(total)
    return np.array(out)


def _time_avg_forcing(setup, i):
    from .scheme import _forcing_values
    return _forcing_values(setup, i)


# --- reports ------------------------------------------------------------------------

RUN_COLUMNS = (
    "step", "t", "identity_residual", "identity_scale", "kinetic", "increment", "dissipation",
    "w1q", "stress_qp", "penalty_norm", "forcing_work", "inequality_slack",
    "newton_iterations", "picard_iterations", "initial_residual", "final_residual", "divergence_residual",
)


@dataclass
class RunReport:
    rows: list
    apriori: dict
    stress_norm: float  # |S^k(DU)|_{L^{q'}(Q)}
    parabolic_ratio: float
    duality_margin: float
    newton_tol: float
    max_relative_identity_residual: float
    inequality_holds: bool
    wall_clock: list = field(default_factory=list)

    @property
    def finite(self) -> bool:
        vals = [v for r in self.rows for v in r.values() if isinstance(v, float)]
        vals += list(self.apriori.values()) + [self.stress_norm, self.parabolic_ratio]
        return bool(np.all(np.isfinite(vals)))

    def to_csv(self, path=None) -> str:
        return _write_csv(RUN_SCHEMA, RUN_COLUMNS, self.rows, path)

    def summary_lines(self):
        a = self.apriori
        return [
            f"max identity residual (relative) {self.max_relative_identity_residual:.3e}",
            f"energy inequality {'holds' if self.inequality_holds else 'VIOLATED'}",
            "a-priori " + " ".join(f"{k}={a[k]:.6g}" for k in APRIORI_KEYS),
            f"stress norm {self.stress_norm:.6g}, parabolic ratio {self.parabolic_ratio:.6g}",
        ]


def build_report(history: StateHistory, setup: ProblemSetup, stats: Sequence = (),
                 config: SolverConfig = SolverConfig()) -> RunReport:
    audit = energy_audit(history, setup)
    space = setup.space
    B = space.div_matrix
    rows = []
    for i, t in enumerate(audit.terms, start=1):
        st = stats[i - 1] if i - 1 < len(stats) else None
        c = space.pressure_mean
        div = B @ history[i]
        div_res = float(np.max(np.abs(div - c * (c @ div) / (c @ c)))) if len(c) else 0.0
        rows.append(dict(
            step=i, t=history.grid.node(i),
            identity_residual=t["identity_residual"], identity_scale=t["identity_scale"],
            kinetic=t["kinetic"], increment=t["increment"], dissipation=t["dissipation"],
            w1q=t["w1q"], stress_qp=t["stress_qp"], penalty_norm=t["penalty_norm"],
            forcing_work=t["forcing_work"], inequality_slack=float(audit.inequality_slack[i]),
            newton_iterations=st.newton_iterations if st else 0,
            picard_iterations=st.picard_iterations if st else 0,
            initial_residual=st.initial_residual if st else 0.0,
            final_residual=st.final_residual if st else 0.0,
            divergence_residual=div_res,
        ))
    ap = apriori_quantities(history, setup, audit)
    qp = setup.exponents.q_prime
    return RunReport(
        rows=rows,
        apriori=ap,
        stress_norm=ap["stress_norm"] ** (1.0 / qp),
        parabolic_ratio=parabolic_interpolation_ratio(history, setup),
        duality_margin=stress_duality_margin(history, setup),
        newton_tol=config.newton_tol,
        max_relative_identity_residual=audit.max_relative_residual,
        inequality_holds=audit.inequality_holds,
        wall_clock=[s.wall_clock for s in stats],
    )


# --- sweeps ---------------------------------------------------------------------------

def history_difference(hist_a: StateHistory, setup_a: ProblemSetup, hist_b: StateHistory,
                       setup_b: ProblemSetup, p: float) -> float:
    """``|U_a - U_b|`` in ``L^p(0,T;L^2)`` for piecewise constant interpolants.

    ``b`` must live on a refinement (in space and time) of ``a``; the coarse
    solution is injected into the fine quadrature points.
    """
    ga, gb = hist_a.grid, hist_b.grid
    if gb.l % ga.l or not math.isclose(ga.T, gb.T):
        raise ValueError("time grids are not nested")
    ratio = gb.l // ga.l
    sb = setup_b.space
    w = sb.qweights
    same = setup_a.space is sb
    X = sb.qpoints.reshape(-1, 2)
    total = 0.0
    vals_a = {}
    for i in range(1, gb.l + 1):
        ia = (i - 1) // ratio + 1
        if ia not in vals_a:
            from .femspace import DiscreteField
            if same:
                vals_a[ia] = sb.eval_velocity(hist_a[ia])[0]
            else:
                fa = DiscreteField(setup_a.space, "velocity", hist_a[ia])
                vals_a[ia] = evaluate_velocity(fa, X).reshape(sb.qpoints.shape)
        ub = sb.eval_velocity(hist_b[i])[0]
        e2 = float(np.sum(w * np.sum((ub - vals_a[ia]) ** 2, axis=2)))
        if math.isinf(p):
            total = max(total, math.sqrt(e2))
        else:
            total += gb.delta * e2 ** (p / 2)
    return total if math.isinf(p) else total ** (1.0 / p)


def error_against(history: StateHistory, setup: ProblemSetup, exact: Callable, p: float, n_time: int = 3) -> float:
    """``|U - u|`` in ``L^p(0,T;L^2)`` with ``exact(t, X)`` and Gauss points per step."""
    space = setup.space
    w = space.qweights
    X = space.qpoints.reshape(-1, 2)
    grid = history.grid
    total = 0.0
    for i in range(1, grid.l + 1):
        u = space.eval_velocity(history[i])[0]
        a, b = grid.interval(i)
        ts, ws = gauss_legendre(n_time, a, b)
        for t, wt in zip(ts, ws):
            ex = np.asarray(exact(t, X), float).reshape(u.shape)
            e2 = float(np.sum(w * np.sum((u - ex) ** 2, axis=2)))
            total += wt * e2 ** (p / 2)
    return total ** (1.0 / p)


SWEEP_COLUMNS = ("axis", "value", "status", "difference", "error") + APRIORI_KEYS + ("parabolic_ratio",)


@dataclass
class SweepTable:
    axis: str
    values: list
    rows: list

    @property
    def differences(self) -> list:
        return [r["difference"] for r in self.rows[1:]]

    @property
    def errors(self) -> list:
        return [r.get("error") for r in self.rows]

    def column(self, key) -> list:
        return [r.get(key) for r in self.rows]

    def to_csv(self, path=None) -> str:
        return _write_csv(SWEEP_SCHEMA, SWEEP_COLUMNS, self.rows, path)


SWEEP_AXES = ("k", "ln", "m")


def _level_setup(base: ProblemSetup, axis: str, value):
    if axis == "k":
        return base.with_(approx=GraphApprox(base.approx.base, base.approx.mode, int(value)))
    if axis == "m":
        return base.with_(m=float(value))
    mesh = base.space.mesh
    steps = int(value) - 1
    if steps < 0:
        raise ValueError(f"ln level must be >= 1, got {value}")
    for _ in range(steps):
        mesh = refine_uniform(mesh)
    space = build_space(mesh, base.space.velocity_element)
    grid = TimeGrid(base.grid.T, base.grid.l * 2 ** steps)
    return base.with_(space=space, grid=grid)


def convergence_sweep(base_setup: ProblemSetup, axis: str, levels: Sequence, config: SolverConfig = SolverConfig(),
                      exact: Optional[Callable] = None, p: Optional[float] = None) -> SweepTable:
    """Run one setup per level along ``axis`` and compare consecutive levels.

    ``k`` and ``m`` levels are parameter values; an ``ln`` level ``j >= 1`` is the
    base setup with mesh and time step both halved ``j - 1`` times.  Failed
    runs are recorded and the sweep moves on.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    levels = list(levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    p = base_setup.q if p is None else p
    rows = []
    prev = None
    for v in levels:
        row = {"axis": axis, "value": v}
        try:
            st = _level_setup(base_setup, axis, v)
            hist, rep = run_simulation(st, config)
        except (SimulationFailure, ValueError) as exc:
            row.update(status="failed", message=str(exc))
            rows.append(row)
            prev = None
            continue
        row.update(status="ok")
        row.update(rep.apriori)
        row["parabolic_ratio"] = rep.parabolic_ratio
        if exact is not None:
            row["error"] = error_against(hist, st, exact, p)
        if prev is not None:
            row["difference"] = history_difference(prev[0], prev[1], hist, st, p)
        rows.append(row)
        prev = (hist, st)
    return SweepTable(axis, levels, rows)
