import numpy as np
import pytest
from scipy import sparse

from brinkman_ocp import assembly, fespace, linsolve, mesh


def test_one_by_one():
    f = linsolve.factorize(sparse.csc_matrix([[2.0]]))
    assert np.allclose(linsolve.solve(f, np.array([4.0])), [2.0])


def test_dense_indefinite_against_gaussian_elimination():
    K = np.array([[2.0, 1, 0], [1, 0, 1], [0, 1, 2]])
    b = np.array([1.0, 2.0, 3.0])
    x = linsolve.factorize(sparse.csc_matrix(K)).solve(b)
    assert np.allclose(x, np.linalg.solve(K, b), rtol=1e-13, atol=1e-14)


def test_taylor_hood_residual(rng):
    m = mesh.build_unit_square(2)
    S = assembly.assemble_system(fespace.SpacePair(m, "th"), 0.1)
    f = linsolve.factorize(S)
    b = rng.normal(size=S.size)
    x, res = f.solve(b, return_residual=True)
    assert np.linalg.norm(S.matrix @ x - b) / np.linalg.norm(b) <= 1e-10
    assert res <= 1e-10


def test_zero_rhs_and_dimension_mismatch():
    f = linsolve.factorize(sparse.identity(3, format="csc"))
    assert not np.any(f.solve(np.zeros(3)))
    with pytest.raises(ValueError):
        f.solve(np.zeros(4))


def test_known_solution_recovered(rng):
    m = mesh.build_unit_square(4)
    S = assembly.assemble_system(fespace.SpacePair(m, "mini"), 1.0)
    x_star = rng.normal(size=S.size)
    x = linsolve.factorize(S).solve(S.matrix @ x_star)
    assert np.linalg.norm(x - x_star) <= 1e-9 * np.linalg.norm(x_star)


def test_reuse_matches_fresh_factorizations(rng):
    m = mesh.build_unit_square(3)
    S = assembly.assemble_system(fespace.SpacePair(m, "th"), 0.5)
    b1, b2 = rng.normal(size=(2, S.size))
    f = linsolve.factorize(S)
    x1, x2 = f.solve(b1), f.solve(b2)
    y1 = linsolve.factorize(S).solve(b1)
    y2 = linsolve.factorize(S).solve(b2)
    assert np.abs(x1 - y1).max() <= 1e-12 * np.abs(y1).max()
    assert np.abs(x2 - y2).max() <= 1e-12 * np.abs(y2).max()
    assert np.array_equal(f.solve(b1), x1)


def test_spd_uses_no_fallback():
    m = mesh.build_unit_square(4)
    S = assembly.assemble_system(fespace.SpacePair(m, "mini"), 1.0)
    assert linsolve.factorize(S).method == "ldlt"


def test_singular_names_pivot():
    with pytest.raises(linsolve.SingularSystemError) as exc:
        linsolve.factorize(sparse.csc_matrix([[1.0, 2.0], [2.0, 4.0]]))
    assert exc.value.pivot == 1
