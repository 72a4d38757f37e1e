import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from implicitflow.diagnostics import (APRIORI_KEYS, RUN_SCHEMA, SWEEP_SCHEMA, apriori_quantities, convergence_sweep,
                                      energy_audit, history_difference, minty_monitor,
                                      parabolic_interpolation_ratio, stress_duality_margin, weak_residual_proxy)
from implicitflow.femspace import project_Pn_div
from implicitflow.fields import make_forcing, taylor_vortex
from implicitflow.rheology import GraphApprox, GraphModel
from implicitflow.scheme import ProblemSetup, SolverConfig, run_simulation
from implicitflow.timegrid import StateHistory, TimeGrid

from conftest import cached_space

NEWTONIAN = GraphApprox(GraphModel("newtonian", mu=1.0), "exact")
BINGHAM_MODEL = GraphModel("bingham", mu=0.5, tau_y=1.0)


def bingham(k=16):
    return GraphApprox(BINGHAM_MODEL, "affine_interp", k)


def forced(level=1, approx=None, m=10.0, T=0.5, l=4, element="MINI"):
    return ProblemSetup(cached_space(level, element), approx or bingham(), TimeGrid(T, l), m=m,
                        forcing=make_forcing("taylor_vortex"), initial=taylor_vortex)


@pytest.fixture(scope="module")
def bingham_run():
    s = forced(level=2)
    hist, rep = run_simulation(s)
    return s, hist, rep


@pytest.fixture(scope="module")
def newtonian_run():
    s = forced(level=2, approx=NEWTONIAN, m=math.inf)
    hist, rep = run_simulation(s)
    return s, hist, rep


def constant_history(setup, scale=1.0):
    U = project_Pn_div(setup.space, taylor_vortex).coefficients
    return StateHistory(setup.grid, [scale * U] * (setup.grid.l + 1))


def test_audit_zero_history():
    s = forced()
    hist = StateHistory(s.grid, [np.zeros(s.space.n_velocity)] * (s.grid.l + 1))
    audit = energy_audit(hist, s)
    assert np.all(audit.identity_residuals == 0)
    assert np.all(audit.inequality_slack == 0)
    assert audit.max_relative_residual == 0.0
    ap = apriori_quantities(hist, s, audit)
    assert set(ap) == set(APRIORI_KEYS) and all(v == 0 for v in ap.values())


def test_newtonian_identity(newtonian_run):
    s, hist, rep = newtonian_run
    assert rep.max_relative_identity_residual <= 10 * rep.newton_tol
    assert rep.inequality_holds


def test_bingham_inequality(bingham_run):
    s, hist, rep = bingham_run
    audit = energy_audit(hist, s)
    assert np.all(audit.inequality_slack >= -audit.slack_tolerance - 1e-12)
    # slack is half the accumulated squared increments, up to solver residuals
    inc = np.cumsum([0.0] + [t["increment"] for t in audit.terms])
    assert np.allclose(audit.inequality_slack, 0.5 * inc, atol=1e-9)
    assert rep.finite


def test_stress_duality(bingham_run, newtonian_run):
    for s, hist, _ in (bingham_run, newtonian_run):
        assert stress_duality_margin(hist, s) >= -1e-8


def test_parabolic_ratio_zero_and_scaling():
    s = forced(level=2)
    zero = StateHistory(s.grid, [np.zeros(s.space.n_velocity)] * (s.grid.l + 1))
    assert parabolic_interpolation_ratio(zero, s) == 0.0
    base = parabolic_interpolation_ratio(constant_history(s), s)
    assert 0 < base < math.inf
    for lam in (1e-3, 0.5, 7.0):
        assert parabolic_interpolation_ratio(constant_history(s, lam), s) == pytest.approx(base, rel=1e-10)


def test_parabolic_ratio_refinement_stable():
    # coarser meshes do not yet resolve the vortex gradients
    vals = [parabolic_interpolation_ratio(constant_history(forced(level=k)), forced(level=k)) for k in (3, 4)]
    assert abs(vals[1] - vals[0]) <= 0.2 * vals[0]


def test_parabolic_ratio_bounded_power_law():
    s = ProblemSetup(cached_space(2), GraphApprox(GraphModel("power_law", q=3.0), "exact"), TimeGrid(0.5, 2))
    r = parabolic_interpolation_ratio(constant_history(s), s)
    assert 0 < r < math.inf


def test_minty_newtonian_nonnegative(newtonian_run):
    s, hist, _ = newtonian_run
    rng = np.random.default_rng(0)
    probes = [0.5 * (A + A.T) for A in rng.standard_normal((6, 2, 2)) * 3]
    margins = minty_monitor(hist, None, s, probes)
    assert margins.shape == (1, 6)
    assert np.all(margins >= -1e-10)
    w = minty_monitor(hist, None, s, probes, weights=lambda t, X: np.exp(-t) * (1 + X[:, 0]))
    assert np.all(w >= -1e-10)


def test_minty_zero_weight(bingham_run):
    s, hist, _ = bingham_run
    z = minty_monitor(hist, None, s, [np.eye(2), np.zeros((2, 2))], weights=lambda t, X: np.zeros(len(X)))
    assert np.all(z == 0)


def test_minty_trend_in_k():
    probes = [np.zeros((2, 2)), 0.05 * np.eye(2), np.array([[0.0, 0.1], [0.1, 0.0]])]
    ks = (8, 16, 32, 64)
    margins = []
    for k in ks:
        s = forced(level=1, approx=bingham(k))
        hist, _ = run_simulation(s)
        margins.append(minty_monitor(hist, None, s, probes)[0])
    c = 4.0 * float(BINGHAM_MODEL.radial(np.array(1.0)))
    for k, v in zip(ks, margins):
        assert v.min() >= -c / k * 0.5  # time horizon 0.5, unit area
    steps = [np.abs(b - a).max() for a, b in zip(margins, margins[1:])]
    assert all(b < a for a, b in zip(steps, steps[1:]))


def test_minty_two_histories(bingham_run):
    s, hist, _ = bingham_run
    s2 = forced(level=1)
    h2, _ = run_simulation(s2)
    out = minty_monitor(hist, h2, s, [np.eye(2)], setup_b=s2)
    assert out.shape == (2, 1) and np.all(np.isfinite(out))


def test_weak_residual_proxy(bingham_run):
    s, hist, _ = bingham_run
    r = weak_residual_proxy(hist, s)
    assert r.shape == (20,) and np.all(np.isfinite(r))


def test_history_difference_identical_and_nested(bingham_run):
    s, hist, _ = bingham_run
    assert history_difference(hist, s, hist, s, 2.0) == 0.0
    coarse = forced(level=1, l=2)
    hc, _ = run_simulation(coarse)
    d = history_difference(hc, coarse, hist, s, 2.0)
    assert d > 0 and np.isfinite(d)
    with pytest.raises(ValueError):
        history_difference(hist, s, hc, coarse.with_(grid=TimeGrid(0.5, 3)), 2.0)


def test_run_report_csv(bingham_run):
    s, hist, rep = bingham_run
    text = rep.to_csv()
    lines = text.splitlines()
    assert lines[0] == f"# schema {RUN_SCHEMA}"
    assert lines[1].startswith("step,t,identity_residual")
    assert len(lines) == 2 + s.grid.l
    assert "wall" not in text
    assert len(rep.summary_lines()) == 4


def test_sweep_k_and_csv():
    s = forced(level=1)
    table = convergence_sweep(s, "k", [8, 16, 32])
    assert table.column("status") == ["ok"] * 3
    d = table.differences
    assert all(x >= 0 for x in d)
    assert d[1] < d[0]
    text = table.to_csv()
    assert text.splitlines()[0] == f"# schema {SWEEP_SCHEMA}"
    assert table.to_csv() == convergence_sweep(s, "k", [8, 16, 32]).to_csv()


def test_sweep_m_penalty():
    s = forced(level=1)
    table = convergence_sweep(s, "m", [1, 10, 100])
    pen = table.column("penalty")
    assert pen[0] > pen[1] > pen[2]


def test_sweep_ln_identical_levels_zero_difference():
    s = forced(level=1, l=2)
    table = convergence_sweep(s, "ln", [1, 2])
    assert table.column("status") == ["ok", "ok"]
    assert table.differences[0] > 0
    # a zero-data run differs by nothing across levels
    z = ProblemSetup(cached_space(1), bingham(), TimeGrid(0.5, 2), m=10.0)
    assert convergence_sweep(z, "ln", [1, 2]).differences == [0.0]


def test_sweep_validation_and_failures():
    s = forced(level=1)
    with pytest.raises(ValueError):
        convergence_sweep(s, "h", [1, 2])
    with pytest.raises(ValueError):
        convergence_sweep(s, "k", [16, 8])
    # k below k_0 for a law with two close jumps fails that level but the sweep continues
    model = GraphModel("bingham", mu=0.5, tau_y=1.0, jumps=((0.4, 0.5),))
    s2 = forced(level=1, approx=GraphApprox(model, "affine_interp", 8))
    t = convergence_sweep(s2, "k", [4, 8], config=SolverConfig())
    assert t.column("status") == ["failed", "ok"]
    assert "difference" not in t.rows[1]


def test_sweep_exact_error_column():
    from implicitflow.fields import manufactured_forcing, manufactured_velocity
    s = ProblemSetup(cached_space(1), NEWTONIAN, TimeGrid(0.5, 2), m=math.inf,
                     forcing=manufactured_forcing(1.0), initial=lambda X: manufactured_velocity(0.0, X))
    t = convergence_sweep(s, "ln", [1, 2], exact=manufactured_velocity, p=2.0)
    e = t.errors
    assert e[1] < e[0]


@given(st.floats(0.05, 20.0))
def test_apriori_scaling_of_kinetic(lam):
    s = forced(level=1)
    h = constant_history(s, lam)
    a = apriori_quantities(h, s)
    b = apriori_quantities(constant_history(s), s)
    assert a["max_kinetic"] == pytest.approx(lam ** 2 * b["max_kinetic"], rel=1e-12)
    assert a["sum_increment"] == 0.0
