import numpy as np
import pytest

from brinkman_ocp import acceptance, fespace, mesh, optimize, problems


def zero(x, y):
    return np.zeros(np.shape(x) + (2,))


def target(x, y):
    return np.stack([np.sin(np.pi * x), x * y], -1)


def _field(fn, m, family="th"):
    sp = fespace.SpacePair(m, family)
    return sp, fespace.interpolate(fn, sp.velocity, 2)


def test_cost_examples(rule):
    m = mesh.build_unit_square(4)
    _, y = _field(target, m)
    # y_h equals its own interpolant; use it as the target
    for u, expected in ((1.0, 0.5), (0.1, 0.005)):
        c = optimize.ControlField.p0(m, np.full(m.n_cells, u), 0.05, 2.0)
        assert abs(optimize.cost(y, c, lambda x, t: y.values(rule), 1.0, rule) - expected) <= 1e-14


def test_density_with_zero_adjoint(rule):
    m = mesh.build_unit_square(3)
    sp, y = _field(target, m)
    z = fespace.zero_field(sp.velocity, 2)
    u = optimize.ControlField.p0(m, np.linspace(1, 2, m.n_cells), 0.5, 3.0)
    d = optimize.reduced_gradient_density(y, z, u, 2.0, rule)
    assert np.allclose(d, 2.0 * u.values, rtol=1e-14)


def test_vi_residual_examples():
    u = np.full(5, 0.1)
    assert optimize.vi_residual(u, np.full(5, 0.2), 0.1, 0.2) == 0.0
    u = np.full(5, 0.15)
    d = np.zeros(5)
    d[2] = 0.3
    assert abs(optimize.vi_residual(u, d, 0.1, 0.2) - 0.3) <= 1e-15
    assert optimize.vi_residual(np.full(2, 0.2), np.array([-0.5, -1.0]), 0.1, 0.2) == 0.0


def test_hessian_zero_direction(rule):
    m = mesh.build_unit_square(3)
    sp, y = _field(target, m)
    z = fespace.zero_field(sp.velocity, 2)
    assert optimize.hessian_quadratic_form(None, 0.0, z, z, 1.0, rule) == 0.0


def test_hessian_cross_term_small_when_target_matches(rule):
    data = acceptance.derivative_check_data()
    m = mesh.build_unit_square(6)
    sp = fespace.SpacePair(m, "th")
    rp = optimize.ReducedProblem(sp, data, "fully", rule)
    u = np.full(rp.shape, 2.0)
    y = rp.state_map(u).velocity
    yq = y.values(rule)
    same = optimize.ProblemData(f=data.f, y_omega=yq, alpha=data.alpha, a=data.a, b=data.b)
    rp2 = optimize.ReducedProblem(sp, same, "fully", rule)
    ev = rp2.evaluate(u)
    v = np.random.default_rng(0).uniform(-1, 1, rp.shape)
    phi = rp2.linearized(ev, v).velocity
    vq = rp2.to_qp(v)
    w = fespace.qp_weights(m, rule)
    cross = 2 * np.sum(w * vq * (phi.values(rule) * ev.zq).sum(-1))
    base = data.alpha * np.sum(w * vq ** 2) + np.sum(w * (phi.values(rule) ** 2).sum(-1))
    assert abs(cross) <= 1e-10 * base
    assert rp2.hessian(u, v) > 0


@pytest.mark.parametrize("solver", [optimize.solve_fully_discrete, optimize.solve_semidiscrete])
def test_zero_data_gives_lower_bound(solver, rule):
    m = mesh.build_unit_square(4)
    sp = fespace.SpacePair(m, "mini")
    data = optimize.ProblemData(f=zero, y_omega=zero, alpha=1.0, a=0.1, b=0.2)
    res = solver(m, sp, data, rule=rule)
    uq = res.control.at_quadrature(rule)
    assert np.allclose(uq, 0.1, rtol=0, atol=1e-15)
    assert abs(res.report.J - 0.5 * 0.1 ** 2) <= 1e-15
    assert res.report.viResidual <= 1e-10


@pytest.mark.parametrize("element", ["mini", "th"])
@pytest.mark.parametrize("scheme", ["fully", "semi"])
def test_derivatives_against_differences(element, scheme):
    ge, he, order = acceptance.derivative_checks(element, scheme)
    assert ge <= 1e-5
    assert he <= 1e-3
    assert 1.8 <= order <= 2.2


def test_fixed_point_cost_monotone(rule):
    data = acceptance.derivative_check_data()
    m = mesh.build_unit_square(4)
    sp = fespace.SpacePair(m, "mini")
    res = optimize.solve_fully_discrete(m, sp, data, {"method": "fixed_point"}, rule)
    J = [h[1] for h in res.report.history]
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(J, J[1:]))
    assert res.report.viResidual <= 1e-10


def test_methods_agree(rule):
    data = acceptance.derivative_check_data()
    m = mesh.build_unit_square(4)
    sp = fespace.SpacePair(m, "mini")
    a = optimize.solve_fully_discrete(m, sp, data, {"method": "fixed_point"}, rule)
    b = optimize.solve_fully_discrete(m, sp, data, {"method": "newton"}, rule)
    assert np.abs(a.control.values - b.control.values).max() <= 1e-8
    assert b.report.iterations <= a.report.iterations


def test_iteration_limit(rule):
    data = problems.build_example1().data
    m = mesh.build_unit_square(4)
    sp = fespace.SpacePair(m, "mini")
    with pytest.raises(optimize.IterationLimitError) as exc:
        optimize.solve_fully_discrete(m, sp, data, {"maxIter": 0}, rule)
    assert exc.value.residual > 0


def test_semidiscrete_control_is_projection(rule):
    data = acceptance.derivative_check_data()
    m = mesh.build_unit_square(4)
    sp = fespace.SpacePair(m, "th")
    res = optimize.solve_semidiscrete(m, sp, data, rule=rule)
    yz = (res.velocity.values(rule) * res.adjoint_velocity.values(rule)).sum(-1)
    proj = np.clip(yz / data.alpha, data.a, data.b)
    assert np.array_equal(res.control.at_quadrature(rule), proj)


def test_example1_optimum_and_second_order(rule):
    prob = problems.build_example1()
    m = mesh.build_unit_square(8)
    sp = fespace.SpacePair(m, "mini")
    res = optimize.solve_fully_discrete(m, sp, prob.data, rule=rule)
    assert res.report.viResidual <= 1e-10
    u = res.control.values
    assert np.all((u >= 0.1) & (u <= 0.2))
    # per-cell projection residual
    rp = optimize.ReducedProblem(sp, prob.data, "fully", rule)
    ev = rp.evaluate(u)
    assert np.abs(u - np.clip(ev.G, 0.1, 0.2)).max() <= 1e-10
    rng = np.random.default_rng(5)
    for _ in range(5):
        v = rng.uniform(-1, 1, rp.shape)
        assert rp.hessian(u, v) > 0


def test_problem_data_validation():
    with pytest.raises(ValueError):
        optimize.ProblemData(f=zero, y_omega=zero, alpha=0.0, a=0.1, b=0.2)
    with pytest.raises(ValueError):
        optimize.ProblemData(f=zero, y_omega=zero, alpha=1.0, a=0.2, b=0.1)
