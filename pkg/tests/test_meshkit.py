import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from implicitflow.meshkit import (MeshError, Triangulation, format_mesh, mesh_size, parse_mesh, read_mesh,
                                  reference_map, refine_uniform, shape_regularity, unit_square_mesh, write_mesh)

from conftest import square_level


@pytest.mark.parametrize("n, cells, verts", [(1, 2, 4), (2, 8, 9), (3, 18, 16), (5, 50, 36)])
def test_unit_square_counts(n, cells, verts):
    m = unit_square_mesh(n)
    assert m.n_cells == cells == 2 * n * n
    assert m.n_vertices == verts


def test_unit_square_rejects_zero():
    with pytest.raises(ValueError):
        unit_square_mesh(0)


def test_area_partition():
    m = unit_square_mesh(4)
    assert abs(m.areas.sum() - 1.0) <= 1e-12
    assert np.all(m.areas > 0)


def test_edge_multiplicity():
    m = unit_square_level = square_level(3)
    _, counts = m._edge_counts()
    assert set(np.unique(counts)) == {1, 2}
    assert np.sum(counts == 1) == len(m.boundary_edges)


def test_refine_counts_and_h():
    m0 = unit_square_mesh(1)
    m1 = refine_uniform(m0)
    assert m1.n_cells == 8
    assert m1.level == 1
    assert mesh_size(m0) == pytest.approx(math.sqrt(2), rel=1e-12)
    assert mesh_size(m1) == pytest.approx(math.sqrt(2) / 2, rel=1e-12)


def test_h_halves_over_levels():
    m = unit_square_mesh(1)
    h0 = mesh_size(m)
    for k in range(1, 5):
        m = refine_uniform(m)
        assert mesh_size(m) == pytest.approx(h0 * 2.0 ** -k, rel=1e-12)


def test_shape_regularity_right_isosceles():
    ratios = [shape_regularity(square_level(k)) for k in range(5)]
    np.testing.assert_allclose(ratios, 1 + math.sqrt(2), rtol=0, atol=1e-12)


def test_shape_regularity_equilateral():
    # inscribed-ball diameter = side/sqrt(3), so h/rho = sqrt(3)
    m = Triangulation(np.array([[0, 0], [1, 0], [0.5, math.sqrt(3) / 2]]), np.array([[0, 1, 2]]))
    assert shape_regularity(m) == pytest.approx(math.sqrt(3), abs=1e-12)


def test_degenerate_cell_rejected():
    with pytest.raises(MeshError):
        Triangulation(np.array([[0, 0], [1, 0], [2, 0]]), np.array([[0, 1, 2]]))


def test_clockwise_cells_reoriented():
    m = Triangulation(np.array([[0, 0], [0, 1], [1, 0]]), np.array([[0, 1, 2]]))
    assert m.areas[0] > 0


@pytest.mark.parametrize("verts, matrix, det", [
    ([[0, 0], [1, 0], [0, 1]], np.eye(2), 1.0),
    ([[0, 0], [2, 0], [0, 2]], 2 * np.eye(2), 4.0),
])
def test_reference_map_examples(verts, matrix, det):
    m = Triangulation(np.array(verts, float), np.array([[0, 1, 2]]))
    F = reference_map(m, 0)
    np.testing.assert_allclose(F.matrix, matrix)
    np.testing.assert_allclose(F.offset, 0.0)
    assert F.det == pytest.approx(det)


def test_reference_map_images_and_det():
    m = unit_square_mesh(2)
    ref = np.array([[0, 0], [1, 0], [0, 1]], float)
    for c in range(m.n_cells):
        F = reference_map(m, c)
        np.testing.assert_allclose(F(ref), m.vertices[m.cells[c]], atol=1e-14)
        assert abs(F.det) == pytest.approx(2 * m.areas[c], rel=1e-12)


def test_reference_map_out_of_range():
    with pytest.raises(IndexError):
        reference_map(unit_square_mesh(1), 2)


@pytest.mark.parametrize("level", range(5))
def test_euler_characteristic(level):
    m = square_level(level)
    assert m.n_vertices - len(m.edges) + m.n_cells == 1
    assert m.euler_characteristic() == 1


def test_boundary_tags_cover_sides():
    m = refine_uniform(unit_square_mesh(2))
    assert set(m.boundary_tags.tolist()) == {1, 2, 3, 4}
    mid = m.vertices[m.boundary_edges].mean(axis=1)
    for tag, (axis, value) in {1: (1, 0.0), 2: (0, 1.0), 3: (1, 1.0), 4: (0, 0.0)}.items():
        np.testing.assert_allclose(mid[m.boundary_tags == tag][:, axis], value)


def test_mesh_file_roundtrip(tmp_path):
    m = refine_uniform(unit_square_mesh(3))
    path = tmp_path / "square.mesh"
    write_mesh(m, path)
    m2 = read_mesh(path)
    np.testing.assert_array_equal(m2.vertices, m.vertices)
    np.testing.assert_array_equal(m2.cells, m.cells)
    np.testing.assert_array_equal(m2.boundary_tags, m.boundary_tags)


def test_mesh_file_comments_and_errors():
    text = "# a comment\nmesh 2\nvertices 3\n0 0\n1 0 # trailing\n0 1\ncells 1\n0 1 2\nboundary 3\n0 1 1\n1 2 1\n2 0 1\n"
    m = parse_mesh(text)
    assert m.n_cells == 1
    with pytest.raises(MeshError):
        parse_mesh(text.replace("cells 1", "cells 2"))
    with pytest.raises(MeshError):
        parse_mesh(text.replace("mesh 2", "mesh 3"))
    with pytest.raises(MeshError):
        parse_mesh(text.replace("2 0 1\n", ""))


@given(st.integers(1, 6), st.integers(0, 2))
def test_refinement_preserves_invariants(n, k):
    m = unit_square_mesh(n)
    for _ in range(k):
        m = refine_uniform(m)
    assert m.n_cells == 2 * n * n * 4 ** k
    assert abs(m.areas.sum() - 1) <= 1e-12
    assert shape_regularity(m) == pytest.approx(1 + math.sqrt(2), abs=1e-12)
    assert m.euler_characteristic() == 1


@given(st.floats(0.2, 5.0), st.floats(-3, 3), st.floats(0.1, 2.0))
def test_shape_ratio_scale_invariant(scale, shift, skew):
    p = np.array([[0, 0], [1, 0], [skew, 1.0]])
    a = Triangulation(p, np.array([[0, 1, 2]]))
    b = Triangulation(scale * p + shift, np.array([[0, 1, 2]]))
    assert shape_regularity(b) == pytest.approx(shape_regularity(a), rel=1e-10)
    assert shape_regularity(refine_uniform(a)) == pytest.approx(shape_regularity(a), rel=1e-10)
