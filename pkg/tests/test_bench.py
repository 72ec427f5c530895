import math

import pytest

from brinkman_ocp import bench, problems


def rows(errs):
    return [{"e": e, "hMax": 2.0 ** -k, "Ndof": 4 ** k} for k, e in enumerate(errs)]


def test_eoc_examples():
    eoc, slope = bench.compute_eoc(rows([1, 0.5, 0.25]), "e")
    assert eoc == pytest.approx([1, 1]) and slope == pytest.approx(-0.5)
    eoc, _ = bench.compute_eoc(rows([1, 0.25, 0.0625]), "e")
    assert eoc == pytest.approx([2, 2])
    eoc, _ = bench.compute_eoc(rows([3, 3, 3]), "e")
    assert eoc == pytest.approx([0, 0])
    with pytest.raises(ValueError):
        bench.compute_eoc(rows([1, 0]), "e")
    with pytest.raises(ValueError):
        bench.compute_eoc(rows([1]), "e")


def test_columns():
    assert bench.COLUMNS == ["level", "Ndof", "hMax", "nCells", "J", "errU_L2", "errY_H1",
                             "errP_L2", "errZ_H1", "errR_L2", "estSt", "estAdj", "estCt",
                             "estTotal", "optimIters", "wallTime"]


def test_example1_invariants(rule):
    import numpy as np
    p = problems.build_example1()
    pts = np.random.default_rng(0).uniform(0, 1, (50, 2))
    g = p.state.velocity_grad(pts[:, 0], pts[:, 1])
    assert np.abs(np.trace(g, axis1=-2, axis2=-1)).max() <= 1e-10
    from brinkman_ocp import fespace, mesh
    m = mesh.build_unit_square(4)
    for f in (p.state.pressure, p.adjoint.pressure):
        assert abs(fespace.integrate(fespace.as_qp(f, m, rule), m, rule)) <= 1e-12
    u = p.u_exact(pts[:, 0], pts[:, 1])
    assert u.min() >= 0.1 and u.max() <= 0.2
    assert max(p.extra["fd_report"].values()) <= 1e-6


def test_example2_data():
    import numpy as np
    d = problems.build_example2().data
    assert np.allclose(d.f(np.array(0.0), np.array(0.0)), [0, 0])
    assert np.allclose(d.y_omega(np.array(0.5), np.array(0.5)), [0, 62.5], atol=1e-10)
    assert (d.a, d.b, d.alpha) == (1.0, 5.0, 1.0)


def test_sweep_rows_and_csv(tmp_path):
    out = tmp_path / "r.csv"
    cfg = bench.SweepConfig(levels=2, n0=2, out=str(out))
    r = bench.run_sweep(cfg)
    assert [x.nCells for x in r] == [8, 32]
    assert r[1].Ndof > r[0].Ndof
    back = bench.read_csv(out)
    assert [b["Ndof"] for b in back] == [x.Ndof for x in r]
    text = out.read_text().splitlines()
    assert any(t.startswith("# tol=") for t in text)
    assert text[[i for i, t in enumerate(text) if not t.startswith("#")][0]] == \
        ",".join(bench.COLUMNS)


def test_lshape_bounds():
    r = bench.run_sweep(bench.SweepConfig(example="lshape", refine="adaptive", levels=2))
    assert all(math.isnan(x.errU_L2) for x in r)


def test_bad_config():
    with pytest.raises(ValueError):
        bench.SweepConfig.from_mapping({"shceme": "fully"})
    with pytest.raises(ValueError):
        bench.SweepConfig(scheme="both").validate()


def test_file_example(tmp_path):
    from brinkman_ocp import mesh
    path = tmp_path / "m.msh"
    mesh.write_mesh(mesh.build_lshape(), path)
    r = bench.run_sweep(bench.SweepConfig(example=f"file:{path}", refine="adaptive", levels=1))
    assert r[0].nCells == 6
