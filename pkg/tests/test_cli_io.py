import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from implicitflow.cli_io import (EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, ConfigError, build_setup,
                                 build_solver_config, cli, parse_config, serialize_config, write_fields)
from implicitflow.meshkit import refine_uniform, unit_square_mesh, write_mesh
from implicitflow.scheme import run_simulation
from implicitflow.timegrid import StateHistory, TimeGrid

from conftest import cached_space
from oracles import read_legacy_vtk

MINIMAL = """
[time]
T = 0.5
l = 2

[model]
name = newtonian
"""

BINGHAM = """
# small Bingham run
[domain]
level = 1
element = MINI

[time]
T = 0.5
l = 4

[model]
name = bingham
mu = 0.5
tau_y = 1.0
approx = affine_interp
k = 16

[regularization]
m = 10

[forcing]
name = taylor_vortex

[initial]
name = taylor_vortex

[solver]
seed = 7

[output]
directory = {out}
stride = 2
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text.format(out=tmp_path / "out"), encoding="utf-8")
    return path


def test_minimal_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.get("solver", "quad_points") == 4
    assert cfg.get("solver", "newton_tol") == 1e-10
    assert cfg.get("regularization", "m") == math.inf
    assert cfg.get("domain", "element") == "MINI"
    s = build_setup(cfg)
    assert s.space.mesh.n_cells == 2 and s.grid.l == 2
    assert build_solver_config(cfg).newton_tol == 1e-10


def test_q_range():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("name = newtonian", "name = power_law\nq = 0.9"))
    assert any("q must exceed 1" in v for v in info.value.violations)


def test_k0_reported():
    text = BINGHAM.replace("k = 16", "k = 3").replace("tau_y = 1.0", "tau_y = 1.0\njumps = 0.5:1.0")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert any("k_0 = 5" in v for v in info.value.violations)


def test_all_violations_listed():
    text = BINGHAM.replace("l = 4", "l = 0").replace("m = 10", "m = 0.5").replace("k = 16", "k = 2") \
        .replace("stride = 2", "stride = 0\nstrid = 1").replace("tau_y = 1.0", "tau_y = 1.0\njumps = 0.5:1.0")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    v = info.value.violations
    assert len(v) >= 5
    joined = "\n".join(v)
    for needle in ("l must be", "m must be", "k_0", "stride", "'strid'"):
        assert needle in joined
    assert "did you mean 'stride'" in joined


@pytest.mark.parametrize("text, needle", [
    ("[time]\nT = 1\n", "missing required key 'l'"),
    (MINIMAL + "[modle]\nx = 1\n", "did you mean 'model'"),
    (MINIMAL.replace("newtonian", "newtonain"), "did you mean 'newtonian'"),
    (MINIMAL + "[forcing]\nname = lid_driven\n", "non-homogeneous"),
    (MINIMAL + "[solver]\nmax_newton = 2.5\n", "integer"),
    (MINIMAL + "[solver]\npicard_fallback = maybe\n", "boolean"),
    (MINIMAL.replace("newtonian", "bingham\ntau_y = 1"), "exact mode needs a continuous law"),
    ("[time\nT = 1", "syntax error"),
])
def test_violation_messages(text, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert needle in str(info.value)


def test_roundtrip_fixed_point(tmp_path):
    cfg = parse_config(BINGHAM.format(out="results").replace("tau_y = 1.0", "tau_y = 1.0\njumps = 2.0:0.5"))
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


@given(st.floats(0.01, 10.0), st.floats(1.01, 6.0), st.integers(1, 100), st.one_of(st.just(math.inf), st.floats(1.0, 1e6)))
def test_roundtrip_property(mu, q, l, m):
    text = f"[time]\nT = 1.5\nl = {l}\n[model]\nname = power_law\nmu = {mu!r}\nq = {q!r}\n[regularization]\nm = {m!r}\n"
    cfg = parse_config(text)
    assert parse_config(serialize_config(cfg)) == cfg


def test_write_fields_zero_run(tmp_path):
    space = cached_space(1)
    hist = StateHistory(TimeGrid(1.0, 2), [np.zeros(space.n_velocity)] * 3)
    paths = write_fields(hist, space, 1, tmp_path)
    assert len(paths) == 3
    for p in paths:
        data = read_legacy_vtk(p)
        assert np.all(data["point_data"]["velocity"] == 0)
        assert len(data["cells"]) == space.mesh.n_cells
        assert np.all(data["cell_types"] == 5)


def test_write_fields_points_bit_exact(tmp_path):
    mesh = refine_uniform(unit_square_mesh(3))
    from implicitflow.femspace import build_space
    space = build_space(mesh, "P2P0")
    rng = np.random.default_rng(0)
    hist = StateHistory(TimeGrid(1.0, 3), rng.standard_normal((4, space.n_velocity)))
    paths = write_fields(hist, space, 2, tmp_path, prefix="p2")
    assert [p.name for p in paths] == ["p2_00000.vtk", "p2_00002.vtk"]
    data = read_legacy_vtk(paths[1])
    text = data["points_text"]
    for (x, y), row in zip(mesh.vertices, text):
        assert row[0] == format(x, ".17g") and row[1] == format(y, ".17g")
    assert np.array_equal(data["points"][:, :2], mesh.vertices)
    nv = mesh.n_vertices
    np.testing.assert_array_equal(data["point_data"]["velocity"][:, 0], hist[2][:nv])
    np.testing.assert_array_equal(data["point_data"]["velocity"][:, 1], hist[2][space.n_scalar: space.n_scalar + nv])
    np.testing.assert_array_equal(data["cells"][:, 1:], mesh.cells)


def test_write_fields_errors(tmp_path):
    space = cached_space(1)
    hist = StateHistory(TimeGrid(1.0, 1), [np.zeros(space.n_velocity)] * 2)
    with pytest.raises(ValueError):
        write_fields(hist, space, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError) as info:
        write_fields(hist, space, 1, blocker / "sub")
    assert "file" in str(info.value)


def test_cli_check_model(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BINGHAM)
    assert cli(["check-model", str(cfg), "--samples", "1000", "--seed", "7"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "monotonicity violations 0" in out
    assert out.strip().endswith("PASS")


def test_cli_mesh_info(tmp_path, capsys):
    path = tmp_path / "unitsquare2.mesh"
    write_mesh(unit_square_mesh(2), path)
    assert cli(["mesh-info", str(path)]) == EXIT_OK
    assert "cells 8, h 0.70711, shape 2.41421" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    bad = write_cfg(tmp_path, MINIMAL.replace("name = newtonian", "name = power_law\nq = 0.9"), "bad.cfg")
    assert cli(["run", str(bad)]) == EXIT_CONFIG
    assert "q must exceed 1" in capsys.readouterr().err
    assert cli([]) == EXIT_USAGE
    assert cli(["explode"]) == EXIT_USAGE
    assert cli(["run", str(tmp_path / "missing.cfg")]) == EXIT_IO
    junk = tmp_path / "junk.mesh"
    junk.write_text("mesh 2\nvertices 1\n")
    assert cli(["mesh-info", str(junk)]) == EXIT_IO
    assert cli(["check-model", str(write_cfg(tmp_path, BINGHAM)), "--samples", "0"]) == EXIT_USAGE


def test_cli_solver_failure(tmp_path, capsys):
    text = BINGHAM.replace("seed = 7", "seed = 7\nnewton_tol = 1e-300\nmax_newton = 1\npicard_fallback = false")
    assert cli(["run", str(write_cfg(tmp_path, text))]) == EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_cli_run_outputs_and_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("IMPLICITFLOW_THREADS", "1")
    cfg = write_cfg(tmp_path, BINGHAM)
    assert cli(["run", str(cfg), "--output", str(tmp_path / "a")]) == EXIT_OK
    assert cli(["run", str(cfg), "--output", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "report.csv").read_bytes()
    b = (tmp_path / "b" / "report.csv").read_bytes()
    assert a == b
    assert a.startswith(b"# schema implicitflow-run-v1\n")
    vtk = sorted(p.name for p in (tmp_path / "a").glob("*.vtk"))
    assert vtk == ["field_00000.vtk", "field_00002.vtk", "field_00004.vtk"]
    data = read_legacy_vtk(tmp_path / "a" / "field_00004.vtk")
    assert np.all(data["cell_data"]["stress_norm"] > 0)


def test_cli_converge(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BINGHAM)
    assert cli(["converge", str(cfg), "--axis", "m", "--levels", "1", "10", "100"]) == EXIT_OK
    path = tmp_path / "out" / "sweep_m.csv"
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema implicitflow-sweep-v1"
    assert len(lines) == 5
    assert "m=10.0 status=ok difference=" in capsys.readouterr().out


def test_build_setup_matches_config():
    cfg = parse_config(BINGHAM.format(out="x"))
    s = build_setup(cfg)
    assert s.approx.mode == "affine_interp" and s.approx.k == 16
    assert s.m == 10.0 and s.space.mesh.n_cells == 8
    hist, rep = run_simulation(s, build_solver_config(cfg))
    assert rep.finite


def test_cli_keeps_partial_fields(tmp_path, monkeypatch):
    import implicitflow.scheme as scheme

    real = scheme.solve_step

    def flaky(setup, U_prev, i, config, stats=None, guess=None):
        if i == 3:
            raise scheme.StepFailure("forced", i, 1.0, U_prev)
        return real(setup, U_prev, i, config, stats, guess)

    monkeypatch.setattr(scheme, "solve_step", flaky)
    cfg = write_cfg(tmp_path, BINGHAM.replace("stride = 2", "stride = 1"))
    assert cli(["run", str(cfg)]) == EXIT_SOLVER
    names = sorted(p.name for p in (tmp_path / "out").glob("*.vtk"))
    assert names == ["field_00000.vtk", "field_00001.vtk", "field_00002.vtk"]
