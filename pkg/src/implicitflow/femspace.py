"""Mixed velocity/pressure finite element pairs on triangle meshes.

Two stable pairs are provided:

* ``MINI``  - continuous P1 velocity enriched by the cubic cell bubble,
  continuous P1 pressure;
* ``P2P0``  - continuous P2 velocity, piecewise constant pressure.

``P1P1`` (equal-order, not inf-sup stable) exists only as a control case for
:func:`discrete_infsup`.

Velocity coefficients are blocked by component: entry ``c * n_scalar + j``
is component ``c`` of scalar degree of freedom ``j``.  Gradients follow the
convention ``grad[..., a, b] = d u_b / d x_a``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .meshkit import Triangulation
from .quadrature import TriangleRule, triangle_rule

__all__ = [
    "ELEMENTS",
    "InfSupError",
    "MixedSpace",
    "DiscreteField",
    "build_space",
    "assemble_div_matrix",
    "project_Pn_div",
    "project_Q",
    "discrete_infsup",
    "lebesgue_norm",
    "sobolev_seminorm",
    "SaddleSolver",
]

ELEMENTS = ("MINI", "P2P0", "P1P1")
QUAD_DEGREE = 7


class InfSupError(RuntimeError):
    """The velocity/pressure saddle-point system is singular."""


# --- reference bases ---------------------------------------------------------

def _p1(xi):
    x, y = xi[:, 0], xi[:, 1]
    val = np.column_stack([1 - x - y, x, y])
    grad = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (len(xi), 3, 2))
    return val, np.array(grad)


def _mini(xi):
    v1, g1 = _p1(xi)
    l0, l1, l2 = v1.T
    bub = 27 * l0 * l1 * l2
    gb = 27 * (g1[:, 0] * (l1 * l2)[:, None] + g1[:, 1] * (l0 * l2)[:, None]
               + g1[:, 2] * (l0 * l1)[:, None])
    return np.column_stack([v1, bub]), np.concatenate([g1, gb[:, None, :]], axis=1)


def _p2(xi):
    lam, gl = _p1(xi)
    val = np.empty((len(xi), 6))
    grad = np.empty((len(xi), 6, 2))
    for i in range(3):
        val[:, i] = lam[:, i] * (2 * lam[:, i] - 1)
        grad[:, i] = (4 * lam[:, i] - 1)[:, None] * gl[:, i]
    for e, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        val[:, 3 + e] = 4 * lam[:, i] * lam[:, j]
        grad[:, 3 + e] = 4 * (lam[:, j][:, None] * gl[:, i] + lam[:, i][:, None] * gl[:, j])
    return val, grad


def _p0(xi):
    return np.ones((len(xi), 1)), np.zeros((len(xi), 1, 2))


_VELOCITY_BASIS = {"MINI": _mini, "P2P0": _p2, "P1P1": _p1}
_PRESSURE_BASIS = {"MINI": _p1, "P2P0": _p0, "P1P1": _p1}


# --- spaces ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MixedSpace:
    """Velocity/pressure pair on a mesh with quadrature data cached per cell."""

    mesh: Triangulation
    velocity_element: str
    n_scalar: int
    vel_cell_dofs: np.ndarray  # (nc, nb) scalar dofs
    n_pressure: int
    prs_cell_dofs: np.ndarray  # (nc, npl)
    boundary_scalar_dofs: np.ndarray
    quadrature: TriangleRule

    @property
    def n_velocity(self) -> int:
        return 2 * self.n_scalar

    @property
    def velocity_dofs(self) -> int:
        return self.n_velocity

    @property
    def pressure_dofs(self) -> int:
        return self.n_pressure

    @cached_property
    def boundary_dofs(self) -> np.ndarray:
        b = self.boundary_scalar_dofs
        return np.concatenate([b, b + self.n_scalar])

    @cached_property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_velocity, dtype=bool)
        mask[self.boundary_dofs] = False
        return np.flatnonzero(mask)

    # geometry and basis at quadrature points
    @cached_property
    def jacobians(self) -> np.ndarray:
        v = self.mesh.vertices[self.mesh.cells]
        return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)  # (nc, 2, 2)

    @cached_property
    def dets(self) -> np.ndarray:
        return np.linalg.det(self.jacobians)

    @cached_property
    def qpoints(self) -> np.ndarray:
        """Physical quadrature points, shape (nc, nq, 2)."""
        v0 = self.mesh.vertices[self.mesh.cells[:, 0]]
        return v0[:, None, :] + np.einsum("kij,qj->kqi", self.jacobians, self.quadrature.points)

    @cached_property
    def qweights(self) -> np.ndarray:
        """Quadrature weights times |det J|, shape (nc, nq)."""
        return np.abs(self.dets)[:, None] * self.quadrature.weights[None, :]

    @cached_property
    def _vel_ref(self):
        return _VELOCITY_BASIS[self.velocity_element](self.quadrature.points)

    @cached_property
    def phi(self) -> np.ndarray:
        """Scalar velocity basis values, shape (nq, nb)."""
        return self._vel_ref[0]

    @cached_property
    def dphi(self) -> np.ndarray:
        """Physical gradients of the scalar velocity basis, shape (nc, nq, nb, 2)."""
        inv = np.linalg.inv(self.jacobians)  # d xi / d x
        return np.einsum("qbj,kja->kqba", self._vel_ref[1], inv)

    @cached_property
    def psi(self) -> np.ndarray:
        """Pressure basis values, shape (nq, npl)."""
        return _PRESSURE_BASIS[self.velocity_element](self.quadrature.points)[0]

    @cached_property
    def velocity_local_dofs(self) -> np.ndarray:
        """Global velocity dofs of each cell, ordered (component, basis), shape (nc, 2*nb)."""
        d = self.vel_cell_dofs
        return np.concatenate([d, d + self.n_scalar], axis=1)

    # evaluation
    def eval_velocity(self, coeffs):
        """Values (nc, nq, 2) and gradients (nc, nq, 2, 2) at quadrature points."""
        c = np.asarray(coeffs, dtype=float)
        loc = c[self.velocity_local_dofs].reshape(self.mesh.n_cells, 2, -1)  # (nc, 2, nb)
        u = np.einsum("qb,kcb->kqc", self.phi, loc)
        g = np.einsum("kqba,kcb->kqac", self.dphi, loc)
        return u, g

    def eval_pressure(self, coeffs):
        c = np.asarray(coeffs, dtype=float)
        return np.einsum("qb,kb->kq", self.psi, c[self.prs_cell_dofs])

    def eval_velocity_at(self, coeffs, cell, xi):
        """Velocity at reference points ``xi`` of cell ``cell``."""
        vals, _ = _VELOCITY_BASIS[self.velocity_element](np.atleast_2d(xi))
        loc = np.asarray(coeffs)[self.velocity_local_dofs[cell]].reshape(2, -1)
        return vals @ loc.T

    # linear forms
    def load_velocity(self, values) -> np.ndarray:
        """Vector ``(int v . W_j)_j`` for values ``v`` at quadrature points (nc, nq, 2)."""
        loc = np.einsum("kq,kqc,qb->kcb", self.qweights, values, self.phi)
        out = np.zeros(self.n_velocity)
        np.add.at(out, self.velocity_local_dofs.ravel(), loc.reshape(self.mesh.n_cells, -1).ravel())
        return out

    def load_pressure(self, values) -> np.ndarray:
        loc = np.einsum("kq,kq,qb->kb", self.qweights, values, self.psi)
        out = np.zeros(self.n_pressure)
        np.add.at(out, self.prs_cell_dofs.ravel(), loc.ravel())
        return out

    # bilinear forms
    def assemble(self, local, rows, cols, shape) -> sp.csr_matrix:
        nr, nc_ = rows.shape[1], cols.shape[1]
        R = np.broadcast_to(rows[:, :, None], (len(rows), nr, nc_)).ravel()
        C = np.broadcast_to(cols[:, None, :], (len(cols), nr, nc_)).ravel()
        return sp.coo_matrix((local.ravel(), (R, C)), shape=shape).tocsr()

    @cached_property
    def scalar_mass_local(self) -> np.ndarray:
        return np.einsum("kq,qa,qb->kab", self.qweights, self.phi, self.phi)

    @cached_property
    def velocity_mass(self) -> sp.csr_matrix:
        m = self.scalar_mass_local
        z = np.zeros_like(m)
        loc = np.block([[m, z], [z, m]])
        d = self.velocity_local_dofs
        return self.assemble(loc, d, d, (self.n_velocity,) * 2)

    @cached_property
    def velocity_stiffness(self) -> sp.csr_matrix:
        """Gram matrix of ``int grad u : grad v``."""
        a = np.einsum("kq,kqai,kqbi->kab", self.qweights, self.dphi, self.dphi)
        z = np.zeros_like(a)
        loc = np.block([[a, z], [z, a]])
        d = self.velocity_local_dofs
        return self.assemble(loc, d, d, (self.n_velocity,) * 2)

    @cached_property
    def pressure_mass(self) -> sp.csr_matrix:
        loc = np.einsum("kq,qa,qb->kab", self.qweights, self.psi, self.psi)
        d = self.prs_cell_dofs
        return self.assemble(loc, d, d, (self.n_pressure,) * 2)

    @cached_property
    def pressure_mean(self) -> np.ndarray:
        """``(int Q_q)_q``."""
        return self.load_pressure(np.ones_like(self.qweights))

    @cached_property
    def div_matrix(self) -> sp.csr_matrix:
        """``B[q, v] = <div W_v, Q_q>`` over all velocity dofs."""
        # d/dx_c of (phi_b e_c) is dphi[..., b, c]
        loc = np.einsum("kq,qp,kqbc->kpcb", self.qweights, self.psi, self.dphi)
        loc = loc.reshape(self.mesh.n_cells, self.psi.shape[1], -1)
        return self.assemble(loc, self.prs_cell_dofs, self.velocity_local_dofs,
                             (self.n_pressure, self.n_velocity))

    @cached_property
    def div_matrix_free(self) -> sp.csr_matrix:
        return self.div_matrix[:, self.free_dofs].tocsr()

    # interpolation
    def interpolate_velocity(self, func) -> "DiscreteField":
        """Nodal interpolant; the MINI bubble is fixed by the value at the centroid."""
        mesh = self.mesh
        nv = mesh.n_vertices
        coef = np.zeros((2, self.n_scalar))
        coef[:, :nv] = np.asarray(func(mesh.vertices), dtype=float).T
        if self.velocity_element == "MINI":
            cen = mesh.vertices[mesh.cells].mean(axis=1)
            lin = coef[:, mesh.cells].mean(axis=2)
            coef[:, nv:] = np.asarray(func(cen), dtype=float).T - lin
        elif self.velocity_element == "P2P0":
            mid = mesh.vertices[mesh.edges].mean(axis=1)
            coef[:, nv:] = np.asarray(func(mid), dtype=float).T
        coef[:, self.boundary_scalar_dofs] = 0.0
        return DiscreteField(self, "velocity", coef.ravel())

    def interpolate_pressure(self, func) -> "DiscreteField":
        mesh = self.mesh
        if self.velocity_element == "P2P0":
            pts = mesh.vertices[mesh.cells].mean(axis=1)
        else:
            pts = mesh.vertices
        return DiscreteField(self, "pressure", np.asarray(func(pts), dtype=float).reshape(-1))

    def velocity_basis_field(self, j: int) -> "DiscreteField":
        c = np.zeros(self.n_velocity)
        c[j] = 1.0
        return DiscreteField(self, "velocity", c)


@dataclass(frozen=True, eq=False)
class DiscreteField:
    """Coefficient vector of a velocity or pressure finite element function."""

    space: MixedSpace
    kind: str
    coefficients: np.ndarray

    def __post_init__(self):
        if self.kind not in ("velocity", "pressure"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        n = self.space.n_velocity if self.kind == "velocity" else self.space.n_pressure
        c = np.asarray(self.coefficients, dtype=float)
        if c.shape != (n,):
            raise ValueError(f"{self.kind} field needs {n} coefficients, got {c.shape}")
        object.__setattr__(self, "coefficients", c)

    def values(self):
        if self.kind == "velocity":
            return self.space.eval_velocity(self.coefficients)[0]
        return self.space.eval_pressure(self.coefficients)

    def gradients(self):
        if self.kind != "velocity":
            raise ValueError("gradients are only available for velocity fields")
        return self.space.eval_velocity(self.coefficients)[1]

    def __add__(self, other):
        return DiscreteField(self.space, self.kind, self.coefficients + other.coefficients)

    def __sub__(self, other):
        return DiscreteField(self.space, self.kind, self.coefficients - other.coefficients)

    def __mul__(self, s):
        return DiscreteField(self.space, self.kind, s * self.coefficients)

    __rmul__ = __mul__


def build_space(mesh: Triangulation, element: str = "MINI", quad_degree: int = QUAD_DEGREE) -> MixedSpace:
    element = str(element).upper()
    if element not in ELEMENTS:
        raise ValueError(f"unsupported element {element!r}; choose from {ELEMENTS}")
    nv, nc = mesh.n_vertices, mesh.n_cells
    t = mesh.cells
    bverts = mesh.boundary_vertices
    if element == "MINI":
        n_scalar = nv + nc
        vdofs = np.column_stack([t, nv + np.arange(nc)])
        bdofs = bverts
    elif element == "P2P0":
        n_scalar = nv + len(mesh.edges)
        vdofs = np.column_stack([t, nv + mesh.cell_edges])
        bdofs = np.concatenate([bverts, nv + np.flatnonzero(mesh.boundary_edge_mask)])
    else:
        n_scalar = nv
        vdofs = t.copy()
        bdofs = bverts
    if element == "P2P0":
        n_p, pdofs = nc, np.arange(nc)[:, None]
    else:
        n_p, pdofs = nv, t.copy()
    return MixedSpace(mesh, element, n_scalar, vdofs, n_p, pdofs, np.sort(bdofs),
                      triangle_rule(quad_degree))


def assemble_div_matrix(space: MixedSpace) -> sp.csr_matrix:
    """Sparse ``B`` with ``B[q, v] = <div W_v, Q_q>``, shape (pressure dofs, velocity dofs)."""
    return space.div_matrix


# --- saddle-point solves -----------------------------------------------------

class SaddleSolver:
    """Direct solver for ``[[A, B^T, 0], [B, 0, c], [0, c^T, 0]]`` on free velocity dofs.

    The last row fixes the pressure multiplier to zero mean.
    """

    def __init__(self, space: MixedSpace, A: sp.spmatrix):
        self.space = space
        B = space.div_matrix_free
        c = sp.csr_matrix(space.pressure_mean.reshape(-1, 1))
        if space.velocity_element == "P1P1":
            # the unstable control pair is rank-checked densely, before SuperLU trips over it
            Bd = np.hstack([B.toarray(), space.pressure_mean.reshape(-1, 1)])
            if np.linalg.matrix_rank(Bd) < space.n_pressure:
                raise InfSupError("singular saddle-point system: spurious pressure mode")
        K = sp.bmat([[A, B.T, None], [B, None, c], [None, c.T, None]], format="csc")
        try:
            self._lu = spla.splu(K)
        except RuntimeError as exc:
            raise InfSupError(f"singular saddle-point system: {exc}") from exc
        piv = np.abs(self._lu.U.diagonal())
        if piv.size and piv.min() <= 1e-13 * piv.max():
            raise InfSupError("singular saddle-point system: zero pivot (spurious pressure mode)")
        self.nf = len(space.free_dofs)
        self.npr = space.n_pressure

    def solve(self, rhs_free, rhs_div=None):
        rhs = np.zeros(self.nf + self.npr + 1)
        rhs[: self.nf] = rhs_free
        if rhs_div is not None:
            rhs[self.nf: self.nf + self.npr] = rhs_div
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise InfSupError("saddle-point solve produced non-finite values")
        return x[: self.nf], x[self.nf: self.nf + self.npr]


def _sample_velocity(space: MixedSpace, samples) -> np.ndarray:
    if isinstance(samples, DiscreteField):
        return samples.values()
    if callable(samples):
        X = space.qpoints
        return np.asarray(samples(X.reshape(-1, 2)), dtype=float).reshape(X.shape)
    return np.asarray(samples, dtype=float)


def _sample_scalar(space: MixedSpace, samples) -> np.ndarray:
    if isinstance(samples, DiscreteField):
        return samples.values()
    X = space.qpoints
    if callable(samples):
        return np.asarray(samples(X.reshape(-1, 2)), dtype=float).reshape(X.shape[:2])
    return np.broadcast_to(np.asarray(samples, dtype=float), X.shape[:2])


def project_Pn_div(space: MixedSpace, samples, return_multiplier: bool = False):
    """L2 projection onto the discretely divergence-free subspace.

    ``samples`` is a callable ``x -> v(x)`` on arrays of shape (N, 2), a
    :class:`DiscreteField`, or values at quadrature points (nc, nq, 2).
    """
    rhs = space.load_velocity(_sample_velocity(space, samples))
    solver = _projector_solver(space)
    u_free, lam = solver.solve(rhs[space.free_dofs])
    coef = np.zeros(space.n_velocity)
    coef[space.free_dofs] = u_free
    field = DiscreteField(space, "velocity", coef)
    if return_multiplier:
        return field, DiscreteField(space, "pressure", lam)
    return field


_PROJ_CACHE: dict = {}


def _projector_solver(space: MixedSpace) -> SaddleSolver:
    key = id(space)
    hit = _PROJ_CACHE.get(key)
    if hit is None or hit[0] is not space:
        f = space.free_dofs
        hit = (space, SaddleSolver(space, space.velocity_mass[f][:, f]))
        if len(_PROJ_CACHE) > 16:
            _PROJ_CACHE.clear()
        _PROJ_CACHE[key] = hit
    return hit[1]


def project_Q(space: MixedSpace, samples) -> DiscreteField:
    """L2 projection onto the pressure space."""
    rhs = space.load_pressure(_sample_scalar(space, samples))
    coef = spla.spsolve(space.pressure_mass.tocsc(), rhs)
    return DiscreteField(space, "pressure", np.atleast_1d(coef))


def discrete_infsup(space: MixedSpace, return_spectrum: bool = False):
    """Discrete inf-sup constant over zero-mean pressures.

    beta^2 is the smallest eigenvalue of ``B A^{-1} B^T`` relative to the
    pressure mass matrix, ``A`` the H^1_0-seminorm Gram matrix, after the
    constant pressure mode.  Returns 0.0 when further (spurious) zero modes
    exist and ``inf`` when the pressure space holds only constants.
    """
    f = space.free_dofs
    if space.n_pressure == 1:
        return (math.inf, np.zeros(1)) if return_spectrum else math.inf
    if len(f) == 0:
        return (0.0, np.zeros(space.n_pressure)) if return_spectrum else 0.0
    A = space.velocity_stiffness[f][:, f].tocsc()
    B = space.div_matrix_free
    lu = spla.splu(A)
    X = lu.solve(B.T.toarray())
    S = B @ X
    S = 0.5 * (S + S.T)
    Mp = space.pressure_mass.toarray()
    ev = sla.eigh(S, Mp, eigvals_only=True)
    scale = max(ev.max(), 1.0)
    n_zero = int(np.sum(ev < 1e-10 * scale))
    beta = 0.0 if n_zero > 1 else math.sqrt(max(ev[1], 0.0))
    if return_spectrum:
        return beta, ev
    return beta


# --- norms ------------------------------------------------------------------

def _pointwise_norm(a, axes):
    return np.sqrt(np.sum(a * a, axis=axes)) if axes else np.abs(a)


def _lp(w, r, p):
    if math.isinf(p):
        return float(r.max()) if r.size else 0.0
    return float(np.sum(w * r ** p) ** (1.0 / p))


def lebesgue_norm(field: DiscreteField, p: float = 2.0) -> float:
    """Quadrature value of ``||field||_{L^p}`` (Euclidean pointwise norm for vectors)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    v = field.values()
    r = _pointwise_norm(v, (2,) if field.kind == "velocity" else ())
    return _lp(field.space.qweights, r, p)


def sobolev_seminorm(field: DiscreteField, p: float = 2.0) -> float:
    """Quadrature value of ``||grad field||_{L^p}`` (Frobenius pointwise norm)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if field.kind != "velocity":
        raise ValueError("seminorm defined for velocity fields")
    g = field.gradients()
    return _lp(field.space.qweights, _pointwise_norm(g, (2, 3)), p)


# --- point evaluation ---------------------------------------------------------

def locate_points(mesh: Triangulation, X, candidates: int = 8):
    """Cell index and reference coordinates of points ``X`` (N, 2).

    Candidate cells come from a centroid k-d tree; a point outside every
    candidate raises ``ValueError``.
    """
    from scipy.spatial import cKDTree

    X = np.atleast_2d(np.asarray(X, dtype=float))
    v = mesh.vertices[mesh.cells]
    tree = cKDTree(v.mean(axis=1))
    kk = min(candidates, mesh.n_cells)
    _, cand = tree.query(X, k=kk)
    cand = cand.reshape(len(X), kk)
    J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
    Jinv = np.linalg.inv(J)
    cells = np.full(len(X), -1)
    xi = np.zeros((len(X), 2))
    best = np.full(len(X), -np.inf)
    for j in range(kk):
        c = cand[:, j]
        r = np.einsum("nij,nj->ni", Jinv[c], X - v[c, 0])
        lam = np.column_stack([1 - r.sum(axis=1), r])
        score = lam.min(axis=1)
        better = score > best
        best[better] = score[better]
        cells[better] = c[better]
        xi[better] = r[better]
    if np.any(best < -1e-10):
        raise ValueError("some points lie outside the mesh")
    return cells, xi


def evaluate_velocity(field: DiscreteField, X) -> np.ndarray:
    """Velocity values at arbitrary points ``X`` (N, 2) of the domain."""
    space = field.space
    cells, xi = locate_points(space.mesh, X)
    vals, _ = _VELOCITY_BASIS[space.velocity_element](xi)  # (N, nb)
    loc = field.coefficients[space.velocity_local_dofs[cells]].reshape(len(cells), 2, -1)
    return np.einsum("nb,ncb->nc", vals, loc)
