"""Simplicial triangulations of polygonal domains in 2D.

Meshes are immutable: :func:`refine_uniform` returns a new mesh.  Every cell
is stored counterclockwise, so the affine map from the reference triangle
``conv{0, e1, e2}`` has positive determinant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "MeshError",
    "Triangulation",
    "AffineMap",
    "unit_square_mesh",
    "refine_uniform",
    "reference_map",
    "shape_regularity",
    "mesh_size",
    "read_mesh",
    "write_mesh",
    "parse_mesh",
    "format_mesh",
]


class MeshError(ValueError):
    """Raised for invalid mesh input or degenerate cells."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Triangulation:
    """Triangle mesh with counterclockwise cells and tagged boundary edges."""

    vertices: np.ndarray
    cells: np.ndarray
    boundary_edges: np.ndarray = None
    boundary_tags: np.ndarray = None
    level: int = 0
    dim: int = field(default=2)

    def __post_init__(self):
        if self.dim != 2:
            raise MeshError("only dim=2 meshes are supported")
        p = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.cells, dtype=np.int64)
        if p.ndim != 2 or p.shape[1] != 2:
            raise MeshError("vertices must have shape (N, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("cells must have shape (M, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(p)):
            raise MeshError("cell vertex index out of range")
        t = t.copy()
        area2 = _signed_area2(p, t)
        if np.any(np.abs(area2) <= 1e-14 * max(1.0, np.ptp(p) ** 2)):
            bad = int(np.flatnonzero(np.abs(area2) <= 1e-14 * max(1.0, np.ptp(p) ** 2))[0])
            raise MeshError(f"cell {bad} is degenerate (zero area)")
        flip = area2 < 0
        t[flip, 1], t[flip, 2] = t[flip, 2].copy(), t[flip, 1].copy()
        object.__setattr__(self, "vertices", _frozen(p))
        object.__setattr__(self, "cells", _frozen(t))

        edges, counts = self._edge_counts()
        boundary = edges[counts == 1]
        if np.any(counts > 2):
            raise MeshError("an edge is shared by more than two cells")
        if self.boundary_edges is None:
            be = boundary
            tags = np.ones(len(be), dtype=np.int64)
        else:
            be = np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
            tags = (np.ones(len(be), dtype=np.int64) if self.boundary_tags is None
                    else np.asarray(self.boundary_tags, dtype=np.int64))
            key_b = {tuple(e) for e in np.sort(boundary, axis=1).tolist()}
            key_g = {tuple(e) for e in np.sort(be, axis=1).tolist()}
            if key_b != key_g:
                raise MeshError("boundary edges do not match the cells' topological boundary")
        object.__setattr__(self, "boundary_edges", _frozen(be))
        object.__setattr__(self, "boundary_tags", _frozen(tags))

    def _edge_counts(self):
        t = self.cells
        all_e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        return np.unique(all_e, axis=0, return_counts=True)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @cached_property
    def areas(self) -> np.ndarray:
        return _frozen(0.5 * _signed_area2(self.vertices, self.cells))

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs."""
        e, _ = self._edge_counts()
        return _frozen(e)

    @cached_property
    def cell_edges(self) -> np.ndarray:
        """Edge indices of each cell, local order (v0v1, v1v2, v2v0)."""
        t = self.cells
        local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1)
        local = np.sort(local, axis=2).reshape(-1, 2)
        nv = self.n_vertices
        keys = self.edges[:, 0] * nv + self.edges[:, 1]
        idx = np.searchsorted(keys, local[:, 0] * nv + local[:, 1])
        return _frozen(idx.reshape(-1, 3))

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return _frozen(np.unique(self.boundary_edges))

    @cached_property
    def boundary_edge_mask(self) -> np.ndarray:
        """Boolean mask over :attr:`edges` marking boundary edges."""
        nv = self.n_vertices
        keys = self.edges[:, 0] * nv + self.edges[:, 1]
        be = np.sort(self.boundary_edges, axis=1)
        return _frozen(np.isin(keys, be[:, 0] * nv + be[:, 1]))

    @property
    def h(self) -> float:
        return mesh_size(self)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + self.n_cells


@dataclass(frozen=True)
class AffineMap:
    """``x = matrix @ xi + offset`` from the reference triangle onto a cell."""

    matrix: np.ndarray
    offset: np.ndarray
    det: float

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        return xi @ self.matrix.T + self.offset


def _signed_area2(p, t):
    a, b, c = p[t[:, 0]], p[t[:, 1]], p[t[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def unit_square_mesh(n_divisions: int) -> Triangulation:
    """Structured mesh of [0,1]^2 with ``2 * n_divisions**2`` right triangles.

    Boundary tags: 1 bottom, 2 right, 3 top, 4 left.
    """
    n = int(n_divisions)
    if n < 1:
        raise MeshError("n_divisions must be >= 1")
    x = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(x, x, indexing="xy")
    p = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    t = np.empty((2 * n * n, 3), dtype=np.int64)
    t[0::2] = np.column_stack([v00, v10, v11])
    t[1::2] = np.column_stack([v00, v11, v01])
    edges, tags = [], []
    for tag, line in ((1, idx[0, :]), (2, idx[:, -1]), (3, idx[-1, ::-1]), (4, idx[::-1, 0])):
        edges.append(np.column_stack([line[:-1], line[1:]]))
        tags.append(np.full(n, tag))
    return Triangulation(p, t, np.concatenate(edges), np.concatenate(tags), level=0)


def refine_uniform(mesh: Triangulation) -> Triangulation:
    """Red refinement: split every triangle into four congruent children."""
    nv = mesh.n_vertices
    p_mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    p = np.vstack([mesh.vertices, p_mid])
    t = mesh.cells
    m = mesh.cell_edges + nv  # midpoints of (v0v1, v1v2, v2v0)
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    mab, mbc, mca = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack([
        np.column_stack([a, mab, mca]),
        np.column_stack([mab, b, mbc]),
        np.column_stack([mca, mbc, c]),
        np.column_stack([mab, mbc, mca]),
    ], axis=1).reshape(-1, 3)

    keys = mesh.edges[:, 0] * nv + mesh.edges[:, 1]
    be = mesh.boundary_edges
    s = np.sort(be, axis=1)
    mid = np.searchsorted(keys, s[:, 0] * nv + s[:, 1]) + nv
    new_be = np.stack([np.column_stack([be[:, 0], mid]), np.column_stack([mid, be[:, 1]])],
                      axis=1).reshape(-1, 2)
    new_tags = np.repeat(mesh.boundary_tags, 2)
    return Triangulation(p, children, new_be, new_tags, level=mesh.level + 1)


def reference_map(mesh: Triangulation, cell_index: int) -> AffineMap:
    """Affine map sending (0,0), (1,0), (0,1) to the cell's vertices in stored order."""
    if not 0 <= cell_index < mesh.n_cells:
        raise IndexError(f"cell index {cell_index} out of range [0, {mesh.n_cells})")
    v = mesh.vertices[mesh.cells[cell_index]]
    A = np.column_stack([v[1] - v[0], v[2] - v[0]])
    return AffineMap(A, v[0].copy(), float(np.linalg.det(A)))


def _cell_diameters_and_inball(mesh: Triangulation):
    v = mesh.vertices[mesh.cells]
    lengths = np.linalg.norm(v[:, [1, 2, 0]] - v, axis=2)
    area = np.abs(mesh.areas)
    if np.any(area == 0):
        raise MeshError("degenerate cell")
    rho = 4.0 * area / lengths.sum(axis=1)  # diameter of the inscribed circle
    return lengths.max(axis=1), rho


def shape_regularity(mesh: Triangulation) -> float:
    """Largest ratio ``h_K / rho_K`` (diameter over inscribed-ball diameter)."""
    h, rho = _cell_diameters_and_inball(mesh)
    return float(np.max(h / rho))


def mesh_size(mesh: Triangulation) -> float:
    h, _ = _cell_diameters_and_inball(mesh)
    return float(h.max())


# --- ASCII mesh format -----------------------------------------------------

def format_mesh(mesh: Triangulation) -> str:
    lines = ["mesh 2", f"vertices {mesh.n_vertices}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines.append(f"cells {mesh.n_cells}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.cells]
    lines.append(f"boundary {len(mesh.boundary_edges)}")
    lines += [f"{i} {j} {tag}" for (i, j), tag in zip(mesh.boundary_edges, mesh.boundary_tags)]
    return "\n".join(lines) + "\n"


def parse_mesh(text: str) -> Triangulation:
    tokens = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens.append(line.split())
    it = iter(tokens)

    def block(name, width, conv):
        try:
            head = next(it)
        except StopIteration:
            raise MeshError(f"missing '{name}' block") from None
        if len(head) != 2 or head[0] != name:
            raise MeshError(f"expected '{name} <count>', got {' '.join(head)!r}")
        count = int(head[1])
        rows = []
        for _ in range(count):
            try:
                row = next(it)
            except StopIteration:
                raise MeshError(f"'{name}' block truncated") from None
            if len(row) != width:
                raise MeshError(f"'{name}' row needs {width} fields: {' '.join(row)!r}")
            rows.append([conv(x) for x in row])
        return np.array(rows, dtype=float if conv is float else np.int64).reshape(count, width)

    try:
        header = next(it)
    except StopIteration:
        raise MeshError("empty mesh file") from None
    if header != ["mesh", "2"]:
        raise MeshError("mesh file must start with 'mesh 2'")
    p = block("vertices", 2, float)
    t = block("cells", 3, int)
    b = block("boundary", 3, int)
    if next(it, None) is not None:
        raise MeshError("trailing content after boundary block")
    return Triangulation(p, t, b[:, :2], b[:, 2])


def read_mesh(path) -> Triangulation:
    return parse_mesh(Path(path).read_text(encoding="utf-8"))


def write_mesh(mesh: Triangulation, path) -> None:
    Path(path).write_text(format_mesh(mesh), encoding="utf-8")
