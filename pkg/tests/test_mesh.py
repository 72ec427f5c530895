import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brinkman_ocp import mesh


def test_unit_square_n1_counts():
    m = mesh.build_unit_square(1)
    assert (m.n_cells, m.n_vertices, m.n_edges, int(m.boundary.sum())) == (2, 4, 5, 4)


def test_unit_square_n2_counts():
    m = mesh.build_unit_square(2)
    assert (m.n_cells, m.n_vertices) == (8, 9)


def test_unit_square_area():
    assert abs(mesh.build_unit_square(4).domain_area - 1.0) <= 1e-14


def test_unit_square_rejects_zero():
    with pytest.raises(ValueError):
        mesh.build_unit_square(0)


def test_lshape_coarse():
    m = mesh.build_lshape()
    assert m.n_cells == 6
    assert np.all(m.signed_areas > 0)
    assert abs(m.domain_area - 3.0) <= 1e-14


def test_bisect_empty_is_identity():
    m = mesh.build_unit_square(2)
    out, _ = mesh.bisect(m, [])
    assert out is m or (np.array_equal(out.cells, m.cells)
                        and np.array_equal(out.vertices, m.vertices))


def test_bisect_area_conservation():
    m = mesh.build_unit_square(1)
    out, parent = mesh.bisect(m, [0, 1])
    child = np.bincount(parent, out.areas, minlength=m.n_cells)
    assert np.abs(child - m.areas).max() <= 1e-14


def test_bisect_one_cell_conforming():
    m = mesh.build_unit_square(2)
    out, _ = mesh.bisect(m, [3])
    out.check_conformity()
    counts = (out.edge_cells >= 0).sum(axis=1)
    assert set(np.unique(counts)) <= {1, 2}
    assert len(out.hanging_vertices()) == 0
    assert out.n_cells > m.n_cells


def test_uniform_refinement_quadruples():
    m = mesh.build_unit_square(2)
    assert mesh.refine_uniform(m, 1).n_cells == 4 * m.n_cells


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_random_bisection_keeps_invariants(seed):
    rng = np.random.default_rng(seed)
    m = mesh.build_lshape()
    for _ in range(6):
        marked = rng.choice(m.n_cells, size=rng.integers(1, m.n_cells + 1), replace=False)
        m, _ = mesh.bisect(m, marked)
        m.check()
        assert abs(m.domain_area - 3.0) <= 1e-12 * 3.0


def test_shape_regularity_bounded_under_nvb():
    rng = np.random.default_rng(3)
    m = mesh.build_unit_square(2)
    start = m.shape_regularity()
    for _ in range(12):
        m, _ = mesh.bisect(m, rng.choice(m.n_cells, size=max(1, m.n_cells // 4), replace=False))
    # newest-vertex bisection produces finitely many similarity classes
    assert m.shape_regularity() <= 4.0 * start


def test_patches():
    m = mesh.build_unit_square(1)
    p = mesh.compute_patches(m)
    assert set(p.edge_neighbors(0)) == {0, 1}
    m4 = mesh.build_unit_square(4)
    p4 = mesh.compute_patches(m4)
    corner = int(np.argmin(np.linalg.norm(m4.centroids, axis=1)))
    assert len(p4.edge_neighbors(corner)) <= 4


def test_patch_symmetry():
    rng = np.random.default_rng(0)
    m = mesh.build_unit_square(2)
    for _ in range(3):
        m, _ = mesh.bisect(m, rng.choice(m.n_cells, size=3, replace=False))
    p = mesh.compute_patches(m)
    E = p.edge_patch.toarray()
    assert np.array_equal(E, E.T)


def test_mesh_roundtrip(tmp_path):
    m = mesh.refine_uniform(mesh.build_lshape(), 2)
    path = tmp_path / "m.msh"
    mesh.write_mesh(m, path)
    r = mesh.read_mesh(path)
    assert np.array_equal(r.vertices, m.vertices)
    assert r.n_cells == m.n_cells
