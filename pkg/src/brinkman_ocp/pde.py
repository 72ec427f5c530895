"""State, adjoint and linearized Stokes--Brinkman solves."""
from dataclasses import dataclass

import numpy as np

from . import assembly
from .fespace import FieldFunction, as_qp, integrate, make_quadrature
from .linsolve import factorize


@dataclass
class StokesSolution:
    velocity: FieldFunction
    pressure: FieldFunction
    solveResidual: float


@dataclass(frozen=True)
class ExactFields:
    """Analytic velocity/pressure pair.

    Callables take ``(x, y)`` arrays; the velocity returns ``(..., 2)``, its
    gradient ``(..., 2, 2)`` indexed ``[component, direction]``.
    """
    velocity: object
    velocity_grad: object
    pressure: object


class StokesOperator:
    """Saddle-point operator for one control, factorized once.

    The state and adjoint problems share the matrix: the adjoint multiplier
    enters with the opposite sign, so the recovered pressure is negated.
    """

    def __init__(self, spaces, control, rule=None, bounds=None):
        self.spaces = spaces
        self.rule = rule or make_quadrature()
        self.control = control
        self.system = assembly.assemble_system(spaces, control, self.rule, bounds)
        self.fact = factorize(self.system)

    def _solve(self, rhs, sign=1.0):
        x, res = self.fact.solve(rhs, return_residual=True)
        y, p, _ = self.system.split(x)
        sp = self.spaces
        vel = FieldFunction(sp.velocity, y, 2, "velocity")
        pres = FieldFunction(sp.pressure, sign * p, 1, "pressure")
        return StokesSolution(vel, pres, float(res))

    def state(self, f):
        return self._solve(assembly.assemble_state_rhs(self.spaces, f, self.rule))

    def adjoint(self, y_h, y_omega):
        rhs = assembly.assemble_adjoint_rhs(self.spaces, y_h, y_omega, self.rule)
        return self._solve(rhs, sign=-1.0)

    def linearized(self, v, y_h):
        return self._solve(
            assembly.assemble_linearized_rhs(self.spaces, v, y_h, self.rule))

    def second_order(self, v1, phi2, v2, phi1):
        return self._solve(assembly.assemble_second_order_rhs(
            self.spaces, v1, phi2, v2, phi1, self.rule))

    def velocity_load(self, fq, sign=1.0):
        """Solve with a velocity load given at quadrature points (nc, nq, 2)."""
        asm = assembly._assembler(self.spaces, self.rule)
        return self._solve(assembly._finish(asm, asm.load(fq)), sign)


def _operator(spaces, control, operator, rule):
    if operator is not None:
        return operator
    return StokesOperator(spaces, control, rule)


def solve_state(mesh, spaces, control, f, rule=None, operator=None):
    """Discrete velocity/pressure for load ``f`` and reaction ``control``."""
    _check_mesh(mesh, spaces)
    return _operator(spaces, control, operator, rule).state(f)


def solve_adjoint(mesh, spaces, control, y_h, y_omega, rule=None, operator=None):
    """Discrete adjoint pair ``(z_h, r_h)`` driven by ``y_h - y_omega``."""
    _check_mesh(mesh, spaces)
    if y_h.space is not spaces.velocity:
        raise ValueError("y_h does not live on the given spaces")
    return _operator(spaces, control, operator, rule).adjoint(y_h, y_omega)


def solve_linearized(mesh, spaces, control, v, y_h, rule=None, operator=None):
    """Directional derivative of the control-to-state map in direction ``v``."""
    _check_mesh(mesh, spaces)
    return _operator(spaces, control, operator, rule).linearized(v, y_h)


def _check_mesh(mesh, spaces):
    if mesh is not spaces.mesh:
        raise ValueError("spaces were built on a different mesh")


def error_norms(solution, exact, rule=None):
    """``velH1seminorm``, ``pressL2`` and ``velL2`` errors by quadrature."""
    rule = rule or make_quadrature()
    mesh = solution.velocity.space.mesh
    ey = as_qp(exact.velocity, mesh, rule) - solution.velocity.values(rule)
    eg = as_qp(exact.velocity_grad, mesh, rule) - solution.velocity.grads(rule)
    ep = as_qp(exact.pressure, mesh, rule) - solution.pressure.values(rule)
    return {
        "velH1seminorm": float(np.sqrt(integrate((eg ** 2).sum(axis=(-2, -1)), mesh, rule))),
        "pressL2": float(np.sqrt(integrate(ep ** 2, mesh, rule))),
        "velL2": float(np.sqrt(integrate((ey ** 2).sum(axis=-1), mesh, rule))),
    }


def l2_norm(values, mesh, rule):
    """L2 norm of qp values (scalar ``(nc, nq)`` or vector ``(nc, nq, 2)``)."""
    v = np.asarray(values)
    sq = v ** 2 if v.ndim == 2 else (v ** 2).reshape(v.shape[:2] + (-1,)).sum(-1)
    return float(np.sqrt(integrate(sq, mesh, rule)))


def divergence_moments(solution, rule=None):
    """Vector ``(psi_k, div y_h)`` over all pressure basis functions."""
    rule = rule or make_quadrature()
    sp_p = solution.pressure.space
    mesh = sp_p.mesh
    div = np.trace(solution.velocity.grads(rule), axis1=-2, axis2=-1)
    psi, _, _ = sp_p.tabulate(rule)
    w = 2.0 * mesh.areas[:, None] * rule.weights[None, :]
    loc = np.einsum("cq,qk,cq->ck", w, psi, div)
    return np.bincount(sp_p.dofmap.ravel(), loc.ravel(), minlength=sp_p.n_dofs)
