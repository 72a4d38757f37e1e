"""Finite element scheme for unsteady flows of implicitly constituted fluids.

Modules
-------
meshkit      triangulations of the unit square, refinement, mesh files
femspace     MINI and P2-P0 mixed spaces, assembly, projections, norms
rheology     radial constitutive laws and their continuous approximations
timegrid     uniform time grids, interpolants and time averages
scheme       step residual, Newton/Picard step solver, time marching
diagnostics  energy audit, a-priori quantities, convergence sweeps
cli_io       configuration files, VTK output, command line
"""
from .femspace import DiscreteField, MixedSpace, build_space, project_Pn_div
from .meshkit import Triangulation, refine_uniform, unit_square_mesh
from .rheology import GraphApprox, GraphModel, check_assumption_battery, exponents
from .scheme import ProblemSetup, SolverConfig, run_simulation, solve_step
from .timegrid import StateHistory, TimeGrid

__version__ = "0.1.0"

__all__ = [
    "DiscreteField",
    "MixedSpace",
    "build_space",
    "project_Pn_div",
    "Triangulation",
    "refine_uniform",
    "unit_square_mesh",
    "GraphApprox",
    "GraphModel",
    "check_assumption_battery",
    "exponents",
    "ProblemSetup",
    "SolverConfig",
    "run_simulation",
    "solve_step",
    "StateHistory",
    "TimeGrid",
]
