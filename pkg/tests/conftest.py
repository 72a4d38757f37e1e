import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from implicitflow.femspace import build_space
from implicitflow.meshkit import refine_uniform, unit_square_mesh

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def square_level(level):
    """Unit square: two triangles refined ``level`` times."""
    mesh = unit_square_mesh(1)
    for _ in range(level):
        mesh = refine_uniform(mesh)
    return mesh


_SPACES = {}


def cached_space(level, element="MINI"):
    key = (level, element)
    if key not in _SPACES:
        _SPACES[key] = build_space(square_level(level), element)
    return _SPACES[key]


def random_velocity(space, rng, scale=1.0):
    c = scale * rng.standard_normal(space.n_velocity)
    c[space.boundary_dofs] = 0.0
    return c


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
