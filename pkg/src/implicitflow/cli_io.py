"""Run configuration, field output and the ``implicitflow`` command line.

Configuration grammar: ``[section]`` headers, ``key = value`` lines and
``#`` comments, read with :mod:`configparser` (interpolation off).
"""
from __future__ import annotations

import argparse
import configparser
import difflib
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import fields
from .femspace import ELEMENTS, build_space
from .meshkit import MeshError, mesh_size, read_mesh, refine_uniform, shape_regularity, unit_square_mesh
from .rheology import MODELS, MODES, GraphApprox, GraphModel, check_assumption_battery, eval_approx
from .timegrid import StateHistory, TimeGrid

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "serialize_config",
    "load_config",
    "build_setup",
    "build_solver_config",
    "write_fields",
    "cli",
    "main",
    "EXIT_OK",
    "EXIT_USAGE",
    "EXIT_CONFIG",
    "EXIT_SOLVER",
    "EXIT_IO",
]

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    """Invalid configuration; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# section -> key -> (kind, default); default None marks a required key
SCHEMA = {
    "domain": {"mesh": ("str", "unit_square"), "level": ("int", 0), "element": ("str", "MINI")},
    "time": {"T": ("float", None), "l": ("int", None)},
    "model": {"name": ("str", None), "mu": ("float", 1.0), "tau_y": ("float", 0.0), "q": ("float", 2.0),
              "approx": ("str", "exact"), "k": ("int", 1), "jumps": ("jumps", ())},
    "regularization": {"m": ("float", math.inf)},
    "forcing": {"name": ("str", "zero")},
    "initial": {"name": ("str", "zero")},
    "solver": {"newton_tol": ("float", 1e-10), "max_newton": ("int", 30), "picard_fallback": ("bool", True),
               "max_picard": ("int", 400), "quad_points": ("int", 4), "seed": ("int", 0)},
    "output": {"directory": ("str", "output"), "stride": ("int", 1)},
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with every default filled in."""

    sections: tuple  # ((section, ((key, value), ...)), ...)

    def __getitem__(self, section) -> dict:
        for name, items in self.sections:
            if name == section:
                return dict(items)
        raise KeyError(section)

    def get(self, section, key):
        return self[section][key]

    def replace(self, section, **changes) -> "RunConfig":
        out = []
        for name, items in self.sections:
            d = dict(items)
            if name == section:
                d.update(changes)
            out.append((name, tuple(d.items())))
        return RunConfig(tuple(out))


def _convert(kind, raw):
    raw = raw.strip()
    if kind == "str":
        return raw
    if kind == "int":
        v = float(raw)
        if not v.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(v)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "jumps":
        # "a1:h1, a2:h2": extra upward steps of the scalar law
        out = []
        for item in filter(None, (x.strip() for x in raw.split(","))):
            a, sep, h = item.partition(":")
            if not sep:
                raise ValueError(f"jump {item!r} must read location:height")
            out.append((float(a), float(h)))
        return tuple(out)
    raise AssertionError(kind)


def _suggest(word, options):
    close = difflib.get_close_matches(word, list(options), n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def parse_config(text: str) -> RunConfig:
    """Parse and validate; raises :class:`ConfigError` listing all violations."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax error: {exc}"]) from exc
    problems = []
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            problems.append(f"unknown section [{sec}]{_suggest(sec, SCHEMA)}")
            continue
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                problems.append(f"unknown key {key!r} in [{sec}]{_suggest(key, SCHEMA[sec])}")
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (kind, default) in keys.items():
            if cp.has_section(sec) and key in cp[sec]:
                try:
                    values[sec][key] = _convert(kind, cp[sec][key])
                except ValueError as exc:
                    problems.append(f"[{sec}] {key}: {exc}")
            elif default is None:
                problems.append(f"missing required key {key!r} in [{sec}]")
            else:
                values[sec][key] = default
    problems += _validate(values)
    if problems:
        raise ConfigError(problems)
    return RunConfig(tuple((s, tuple(values[s].items())) for s in SCHEMA))


def _validate(v) -> list:
    out = []
    dom, tm, mo, rg, so, ou = (v["domain"], v["time"], v["model"], v["regularization"], v["solver"], v["output"])
    if "level" in dom and dom["level"] < 0:
        out.append("[domain] level must be >= 0")
    if "element" in dom and dom["element"].upper() not in ELEMENTS:
        out.append(f"[domain] element must be one of {ELEMENTS}")
    if "T" in tm and not (tm["T"] > 0 and math.isfinite(tm["T"])):
        out.append("[time] T must be positive")
    if "l" in tm and tm["l"] < 1:
        out.append("[time] l must be >= 1")
    n_before = len(out)
    name = mo.get("name")
    if name is not None and name not in MODELS:
        out.append(f"[model] name must be one of {MODELS}{_suggest(name, MODELS)}")
    if "q" in mo and not mo["q"] > 1:
        out.append("[model] q must exceed 1")
    if "mu" in mo and not mo["mu"] > 0:
        out.append("[model] mu must be positive")
    if "tau_y" in mo and mo["tau_y"] < 0:
        out.append("[model] tau_y must be nonnegative")
    if "approx" in mo and mo["approx"] not in MODES:
        out.append(f"[model] approx must be one of {MODES}{_suggest(mo['approx'], MODES)}")
    if "k" in mo and mo["k"] < 1:
        out.append("[model] k must be >= 1")
    if len(out) == n_before and name is not None and all(x in mo for x in ("mu", "tau_y", "q", "approx", "k")):
        try:
            model = _model(mo)
            approx_mode = mo["approx"]
            probe = GraphApprox(model, "exact", 1)
            if approx_mode == "affine_interp" and mo["k"] < probe.k_0:
                out.append(f"[model] affine_interp needs k >= k_0 = {probe.k_0}, got k = {mo['k']}")
            elif approx_mode == "exact" and not model.continuous:
                out.append("[model] exact mode needs a continuous law; use mollify or affine_interp")
        except ValueError as exc:
            out.append(f"[model] {exc}")
    if "m" in rg and not rg["m"] >= 1:
        out.append("[regularization] m must be >= 1 or inf")
    for kind in ("forcing", "initial"):
        nm = v[kind].get("name")
        if nm is None:
            continue
        if nm in fields.REJECTED_FIELDS:
            out.append(f"[{kind}] {fields.REJECTED_FIELDS[nm]}")
        elif nm not in fields.BUILTIN_FIELDS:
            out.append(f"[{kind}] unknown field {nm!r}{_suggest(nm, fields.BUILTIN_FIELDS)}")
    if "newton_tol" in so and not so["newton_tol"] > 0:
        out.append("[solver] newton_tol must be positive")
    for key in ("max_newton", "quad_points"):
        if key in so and so[key] < 1:
            out.append(f"[solver] {key} must be >= 1")
    if "max_picard" in so and so["max_picard"] < 0:
        out.append("[solver] max_picard must be >= 0")
    if "stride" in ou and ou["stride"] < 1:
        out.append("[output] stride must be >= 1")
    return out


def _model(mo) -> GraphModel:
    return GraphModel(mo["name"], mu=mo["mu"], tau_y=mo["tau_y"], q=mo["q"], jumps=mo.get("jumps", ()))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    if isinstance(v, tuple):
        return ", ".join(f"{a!r}:{h!r}" for a, h in v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for sec, items in cfg.sections:
        lines.append(f"[{sec}]")
        lines += [f"{k} = {_format_value(v)}" for k, v in items]
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# --- building runs --------------------------------------------------------------

def build_mesh(cfg: RunConfig):
    dom = cfg["domain"]
    if dom["mesh"] == "unit_square":
        mesh = unit_square_mesh(1)
    else:
        mesh = read_mesh(dom["mesh"])
    for _ in range(dom["level"]):
        mesh = refine_uniform(mesh)
    return mesh


def build_setup(cfg: RunConfig):
    from .scheme import ProblemSetup

    mo = cfg["model"]
    model = _model(mo)
    approx = GraphApprox(model, mo["approx"], mo["k"])
    space = build_space(build_mesh(cfg), cfg.get("domain", "element"))
    grid = TimeGrid(cfg.get("time", "T"), cfg.get("time", "l"))
    return ProblemSetup(space, approx, grid, m=cfg.get("regularization", "m"),
                        forcing=fields.make_forcing(cfg.get("forcing", "name"), mo["mu"]),
                        initial=fields.make_initial(cfg.get("initial", "name")),
                        quad_points=cfg.get("solver", "quad_points"))


def build_solver_config(cfg: RunConfig):
    from .scheme import SolverConfig

    so = cfg["solver"]
    return SolverConfig(newton_tol=so["newton_tol"], max_newton=so["max_newton"],
                        picard_fallback=so["picard_fallback"], max_picard=so["max_picard"])


# --- VTK output -------------------------------------------------------------------

def _g(x) -> str:
    return format(float(x), ".17g")


def write_fields(history: StateHistory, space, stride: int = 1, directory=".", setup=None,
                 prefix: str = "field") -> list:
    """Legacy VTK ASCII files for steps ``0, stride, 2 stride, ...``.

    Point data: the velocity at the mesh vertices.  Cell data: quadrature
    averages of ``|Du|`` and, when ``setup`` is given, of ``|S^k(Du)|``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc
    mesh = space.mesh
    nv, nc = mesh.n_vertices, mesh.n_cells
    w = space.qweights
    area = w.sum(axis=1)
    paths = []
    for i in range(0, history.grid.l + 1, stride):
        coef = history[i]
        u, g = space.eval_velocity(coef)
        D = 0.5 * (g + np.swapaxes(g, -1, -2))
        nD = np.sqrt(np.einsum("kqab,kqab->kq", D, D))
        avg_D = np.sum(w * nD, axis=1) / area
        if setup is not None:
            t = history.grid.node(i)
            S = eval_approx(setup.approx, D, None if setup.approx.base.autonomous else t)
            avg_S = np.sum(w * np.sqrt(np.einsum("kqab,kqab->kq", S, S)), axis=1) / area
        else:
            avg_S = np.zeros(nc)
        vel = np.stack([coef[:nv], coef[space.n_scalar: space.n_scalar + nv]], axis=1)
        lines = ["# vtk DataFile Version 3.0", f"implicitflow step {i} t {_g(history.grid.node(i))}",
                 "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
        lines += [f"{_g(x)} {_g(y)} 0" for x, y in mesh.vertices]
        lines.append(f"CELLS {nc} {4 * nc}")
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.cells]
        lines.append(f"CELL_TYPES {nc}")
        lines += ["5"] * nc
        lines += [f"POINT_DATA {nv}", "VECTORS velocity double"]
        lines += [f"{_g(a)} {_g(b)} 0" for a, b in vel]
        lines += [f"CELL_DATA {nc}", "SCALARS strain_rate_norm double 1", "LOOKUP_TABLE default"]
        lines += [_g(x) for x in avg_D]
        lines += ["SCALARS stress_norm double 1", "LOOKUP_TABLE default"]
        lines += [_g(x) for x in avg_S]
        path = directory / f"{prefix}_{i:05d}.vtk"
        try:
            path.write_text("\n".join(lines) + "\n", encoding="ascii")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        paths.append(path)
    return paths


# --- command line -----------------------------------------------------------------

def _limit_threads():
    n = os.environ.get("IMPLICITFLOW_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(1, int(n)))


def _parser():
    p = argparse.ArgumentParser(prog="implicitflow", description="Discrete solver for implicitly constituted fluids")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a simulation and write fields and a CSV report")
    r.add_argument("config")
    r.add_argument("--output", help="override [output] directory")
    c = sub.add_parser("converge", help="convergence sweep along one axis")
    c.add_argument("config")
    c.add_argument("--axis", choices=("k", "ln", "m"), required=True)
    c.add_argument("--levels", nargs="+", type=float, required=True)
    c.add_argument("--output", help="override [output] directory")
    m = sub.add_parser("check-model", help="sampled checks of the constitutive law")
    m.add_argument("config")
    m.add_argument("--samples", type=int, default=1000)
    m.add_argument("--seed", type=int, default=None)
    i = sub.add_parser("mesh-info", help="print mesh statistics")
    i.add_argument("mesh")
    return p


class _UsageError(Exception):
    pass


def cli(argv=None) -> int:
    """Entry point returning an exit code (0 ok, 1 usage, 2 config, 3 solver, 4 I/O)."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    limiter = _limit_threads()
    try:
        return _dispatch(args)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def _load(path):
    try:
        return load_config(path)
    except OSError as exc:
        raise _IOFailure(f"cannot read config {path}: {exc}") from exc


class _IOFailure(Exception):
    pass


def _dispatch(args) -> int:
    from .scheme import SimulationFailure

    try:
        if args.command == "mesh-info":
            return _mesh_info(args.mesh)
        cfg = _load(args.config)
        if args.command == "check-model":
            return _check_model(cfg, args)
        if args.command == "run":
            return _run(cfg, args)
        if args.command == "converge":
            return _converge(cfg, args)
    except ConfigError as exc:
        print("configuration invalid:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (_IOFailure, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_USAGE


def _mesh_info(path) -> int:
    try:
        mesh = read_mesh(path)
    except OSError as exc:
        raise _IOFailure(f"cannot read mesh {path}: {exc}") from exc
    except (MeshError, ValueError) as exc:
        raise _IOFailure(f"malformed mesh {path}: {exc}") from exc
    print(f"vertices {mesh.n_vertices}, cells {mesh.n_cells}, boundary edges {len(mesh.boundary_edges)}")
    print(f"cells {mesh.n_cells}, h {mesh_size(mesh):.5f}, shape {shape_regularity(mesh):.5f}")
    return EXIT_OK


def _check_model(cfg, args) -> int:
    mo = cfg["model"]
    approx = GraphApprox(_model(mo), mo["approx"], mo["k"])
    seed = cfg.get("solver", "seed") if args.seed is None else args.seed
    if args.samples < 1:
        print("--samples must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    rep = check_assumption_battery(approx, args.samples, seed)
    for line in rep.lines():
        print(line)
    print("PASS" if rep.passed else "FAIL")
    return EXIT_OK


def _outdir(cfg, args) -> Path:
    return Path(args.output or cfg.get("output", "directory"))


def _run(cfg, args) -> int:
    from .scheme import SimulationFailure, run_simulation

    setup = build_setup(cfg)
    out = _outdir(cfg, args)
    try:
        history, report = run_simulation(setup, build_solver_config(cfg))
    except SimulationFailure as exc:
        done = len(exc.states) - 1
        if done >= 1:
            # keep the completed steps on a truncated grid
            partial = StateHistory(TimeGrid(done * setup.grid.delta, done), exc.states)
            write_fields(partial, setup.space, cfg.get("output", "stride"), out, setup)
            print(f"wrote fields of {done} completed steps to {out}", file=sys.stderr)
        raise
    write_fields(history, setup.space, cfg.get("output", "stride"), out, setup)
    report.to_csv(out / "report.csv")
    for line in report.summary_lines():
        print(line)
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def _converge(cfg, args) -> int:
    from .diagnostics import convergence_sweep

    setup = build_setup(cfg)
    levels = [int(v) if args.axis != "m" else v for v in args.levels]
    table = convergence_sweep(setup, args.axis, levels, build_solver_config(cfg))
    out = _outdir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{args.axis}.csv"
    table.to_csv(path)
    for r in table.rows:
        diff = r.get("difference")
        print(f"{args.axis}={r['value']} status={r['status']}"
              + (f" difference={diff:.6e}" if diff is not None else ""))
    print(f"wrote {path}")
    return EXIT_OK if all(r["status"] == "ok" for r in table.rows) else EXIT_SOLVER


def main() -> None:  # pragma: no cover
    sys.exit(cli())
