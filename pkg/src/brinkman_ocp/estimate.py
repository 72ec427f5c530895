"""
Residual a posteriori error indicators, marking and the adaptive loop.

For a velocity/pressure pair ``(w_h, q_h)`` with element residual ``R`` and
normal-flux jump ``J`` the local indicator is

    E_K^2 = h_K^2 |R|_K^2 + h_K |J|_{dK \\ dOmega}^2 + |div w_h|_K^2

with ``h_K`` the longest edge of ``K``. The state uses the flux
``grad y_h - p_h I`` and the adjoint ``grad z_h + r_h I``.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import control_at_qp
from .fespace import (SpacePair, as_qp, gauss_line, integrate, make_quadrature,
                      qp_weights)
from .mesh import bisect
from .optimize import (FULLY, SEMI, ControlField, OptimizerOptions,
                       solve_fully_discrete, solve_semidiscrete)
from .pde import error_norms, l2_norm

log = logging.getLogger(__name__)

EDGE_GAUSS_POINTS = 3


class EstimatorMismatchError(ValueError):
    """Indicator tables built on different meshes."""


@dataclass
class IndicatorTable:
    """Squared per-cell indicator contributions.

    Control tables keep ``|u_breve - u_h|_K^2`` in ``etaR2`` and zeros in the
    other columns.
    """
    mesh: object
    etaR2: np.ndarray
    etaJ2: np.ndarray
    etaDiv2: np.ndarray
    which: str

    @property
    def total2(self):
        return self.etaR2 + self.etaJ2 + self.etaDiv2

    @property
    def estimator(self):
        return float(np.sqrt(self.total2.sum()))

    def dump_csv(self, path):
        with open(path, "w") as fh:
            fh.write("cell_id,etaR2,etaJ2,etaDiv2,total2\n")
            for k, row in enumerate(zip(self.etaR2, self.etaJ2, self.etaDiv2, self.total2)):
                fh.write(f"{k}," + ",".join(repr(float(v)) for v in row) + "\n")


@dataclass
class OscillationTable:
    mesh: object
    cells: np.ndarray
    values: np.ndarray

    @property
    def total(self):
        return float(np.sqrt(self.values.sum()))


# -- edge traces ------------------------------------------------------------

@dataclass(frozen=True)
class EdgeGeometry:
    edges: np.ndarray        # interior edge ids
    cells: np.ndarray        # (ne, 2) incident cells
    normal: np.ndarray       # (ne, 2) outward normal of cells[:, 0]
    length: np.ndarray
    bary: np.ndarray         # (2, ne, ng, 3) points in each incident cell
    weights: np.ndarray      # (ng,) on [0, 1]
    points: np.ndarray       # (ne, ng, 2)


def edge_geometry(mesh, n_points=EDGE_GAUSS_POINTS):
    if "_edge_geom" in mesh.__dict__ and mesh.__dict__["_edge_geom"][0] == n_points:
        return mesh.__dict__["_edge_geom"][1]
    ec = mesh.edge_cells
    interior = np.flatnonzero(ec[:, 1] >= 0)
    cells = ec[interior]
    v0 = mesh.edges[interior, 0]
    v1 = mesh.edges[interior, 1]
    X = mesh.vertices
    t, w = gauss_line(n_points)
    tang = X[v1] - X[v0]
    length = np.linalg.norm(tang, axis=1)
    normal = np.stack([tang[:, 1], -tang[:, 0]], axis=1) / length[:, None]
    opp = X[mesh.cells[cells[:, 0], mesh.edge_local[interior, 0]]]
    flip = np.einsum("ed,ed->e", normal, opp - X[v0]) > 0
    normal[flip] *= -1.0
    bary = np.zeros((2, len(interior), n_points, 3))
    for side in range(2):
        loc = mesh.cells[cells[:, side]]
        i0 = np.argmax(loc == v0[:, None], axis=1)
        i1 = np.argmax(loc == v1[:, None], axis=1)
        r = np.arange(len(interior))
        bary[side, r, :, i0] = 1.0 - t[None, :]
        bary[side, r, :, i1] = t[None, :]
    points = X[v0][:, None, :] + t[None, :, None] * tang[:, None, :]
    geom = EdgeGeometry(interior, cells, normal, length, bary, w, points)
    mesh.__dict__["_edge_geom"] = (n_points, geom)
    return geom


def _field_at(field_fn, cells, bary, grad):
    """Vectorized evaluation of ``field_fn`` at per-edge barycentric points."""
    sp = field_fn.space
    el = sp.element
    loc = field_fn._local()[cells]
    if grad:
        dl = el.dlam(bary)                                  # (ne, ng, nloc, 3)
        g = np.einsum("egik,ekd->egid", dl, sp.mesh.grad_lambda[cells])
        if field_fn.ncomp == 1:
            return np.einsum("egid,ei->egd", g, loc)
        return np.einsum("egid,eim->egmd", g, loc)
    phi = el.values(bary)
    if field_fn.ncomp == 1:
        return np.einsum("egi,ei->eg", phi, loc)
    return np.einsum("egi,eim->egm", phi, loc)


def one_sided_fluxes(mesh, velocity, pressure, pressure_sign=-1.0,
                     n_points=EDGE_GAUSS_POINTS):
    """Traces ``sigma . n`` from both sides of every interior edge, where
    ``sigma = grad w + pressure_sign * q I`` and ``n`` is the outward normal of
    the respective cell. Returns ``(geometry, flux_plus, flux_minus)``."""
    geom = edge_geometry(mesh, n_points)
    out = []
    for side, sgn in ((0, 1.0), (1, -1.0)):
        c = geom.cells[:, side]
        g = _field_at(velocity, c, geom.bary[side], True)       # (ne, ng, 2, 2)
        q = _field_at(pressure, c, geom.bary[side], False)      # (ne, ng)
        n = sgn * geom.normal[:, None, :]
        flux = np.einsum("egmd,egd->egm", g, np.broadcast_to(n, g.shape[:2] + (2,)))
        flux = flux + pressure_sign * q[..., None] * n
        out.append(flux)
    return geom, out[0], out[1]


def edge_jumps(mesh, velocity, pressure, pressure_sign=-1.0):
    """``|[[sigma n]]|_e^2`` on interior edges and the edge geometry."""
    geom, fp, fm = one_sided_fluxes(mesh, velocity, pressure, pressure_sign)
    jump = fp + fm
    sq = geom.length * np.einsum("g,egm->e", geom.weights, jump ** 2)
    return geom, sq


def _indicators(mesh, control, velocity, pressure, load_q, pressure_sign, rule, which):
    h = mesh.diameters
    uq = control_at_qp(control, mesh, rule)
    lap = velocity.laplacians(rule)
    vq = velocity.values(rule)
    gp = pressure.grads(rule)
    R = load_q + lap - uq[..., None] * vq + pressure_sign * gp
    etaR2 = h ** 2 * integrate((R ** 2).sum(-1), mesh, rule, per_cell=True)
    geom, jsq = edge_jumps(mesh, velocity, pressure, pressure_sign)
    per_cell = np.bincount(geom.cells[:, 0], jsq, minlength=mesh.n_cells) \
        + np.bincount(geom.cells[:, 1], jsq, minlength=mesh.n_cells)
    etaJ2 = h * per_cell
    div = np.trace(velocity.grads(rule), axis1=-2, axis2=-1)
    etaDiv2 = integrate(div ** 2, mesh, rule, per_cell=True)
    return IndicatorTable(mesh, etaR2, etaJ2, etaDiv2, which)


def state_indicators(mesh, spaces, control, y_h, p_h, f, rule=None):
    """Residual ``f + lap y_h - u y_h - grad p_h`` and jump of
    ``(grad y_h - p_h I) n``."""
    rule = rule or make_quadrature()
    fq = as_qp(f, mesh, rule)
    return _indicators(mesh, control, y_h, p_h, fq, -1.0, rule, "state")


def adjoint_indicators(mesh, spaces, control, y_h, z_h, r_h, y_omega, rule=None):
    """Residual ``y_h - y_omega + lap z_h - u z_h + grad r_h`` and jump of
    ``(grad z_h + r_h I) n``."""
    rule = rule or make_quadrature()
    load = y_h.values(rule) - as_qp(y_omega, mesh, rule)
    return _indicators(mesh, control, z_h, r_h, load, 1.0, rule, "adjoint")


def control_indicators(u_h, u_breve, rule=None):
    """Per-cell ``|u_breve - u_h|_K^2``; zero for implicit controls."""
    mesh = u_h.mesh
    zeros = np.zeros(mesh.n_cells)
    if u_h.kind == ControlField.IMPLICIT:
        return IndicatorTable(mesh, zeros, zeros.copy(), zeros.copy(), "control")
    rule = rule or make_quadrature()
    d = control_at_qp(u_breve, mesh, rule) - u_h.at_quadrature(rule)
    ct = integrate(d ** 2, mesh, rule, per_cell=True)
    return IndicatorTable(mesh, ct, zeros, zeros.copy(), "control")


def oscillation(v, mesh, subset=None, rule=None):
    """``h_K^2 |v - P_K v|_K^2`` on the cells in ``subset`` (all by default)."""
    rule = rule or make_quadrature()
    cells = np.arange(mesh.n_cells) if subset is None else np.asarray(subset, dtype=int)
    vq = as_qp(v, mesh, rule)
    w = qp_weights(mesh, rule)
    mean = np.einsum("cq,cq...->c...", w, vq) / mesh.areas.reshape((-1,) + (1,) * (vq.ndim - 2))
    dev = vq - mean[:, None, ...]
    sq = dev ** 2 if dev.ndim == 2 else (dev ** 2).sum(-1)
    vals = mesh.diameters ** 2 * integrate(sq, mesh, rule, per_cell=True)
    return OscillationTable(mesh, cells, vals[cells])


def total_estimator(st, adj, ct=None):
    """``E_ocp = sqrt(E_st^2 + E_adj^2 + E_ct^2)`` and combined ``E_K^2``."""
    tables = [t for t in (st, adj, ct) if t is not None]
    mesh = tables[0].mesh
    for t in tables[1:]:
        if t.mesh is not mesh or len(t.etaR2) != len(tables[0].etaR2):
            raise EstimatorMismatchError("indicator tables come from different meshes")
    per_cell = sum(t.total2 for t in tables)
    return float(np.sqrt(per_cell.sum())), per_cell


def mark_max_strategy(per_cell, theta=0.5):
    """Cells with ``E_K >= theta * max E``; ``per_cell`` holds ``E_K``."""
    e = np.asarray(per_cell, dtype=float)
    if e.size == 0:
        raise ValueError("cannot mark on an empty mesh")
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    return np.flatnonzero(e >= theta * e.max())


# -- levels and the adaptive loop ------------------------------------------

@dataclass
class SolveOptions:
    scheme: str = FULLY
    element: str = "mini"
    tol: float = 1e-10
    maxIter: int = 200
    method: str = "newton"
    quad_degree: int = 10
    theta: float = 0.5
    maxLevels: int = 1
    ndof_cap: int = 300_000

    def optimizer(self):
        return OptimizerOptions(tol=self.tol, maxIter=self.maxIter, method=self.method)


@dataclass
class LevelRecord:
    level: int
    mesh: object
    spaces: object
    result: object
    estimators: dict
    per_cell: np.ndarray
    tables: dict
    errors: dict = None
    oscillation: dict = field(default_factory=dict)
    ndof: int = 0
    wall_time: float = 0.0


def _problem_parts(problem):
    data = getattr(problem, "data", problem)
    exact = problem if getattr(problem, "state", None) is not None else None
    return data, exact


def exact_errors(problem, result, rule):
    """True errors of a computed optimum against the manufactured fields."""
    mesh = result.velocity.space.mesh
    es = error_norms(result.state, problem.state, rule)
    ea = error_norms(result.adjoint, problem.adjoint, rule)
    uq = result.control.at_quadrature(rule)
    eu = l2_norm(uq - as_qp(problem.u_exact, mesh, rule), mesh, rule)
    return {"errU_L2": eu, "errY_H1": es["velH1seminorm"], "errP_L2": es["pressL2"],
            "errZ_H1": ea["velH1seminorm"], "errR_L2": ea["pressL2"]}


def solve_level(mesh, problem, opts, level=0):
    """Optimize on ``mesh`` and evaluate all indicators (and errors, if known)."""
    t0 = time.perf_counter()
    data, exact = _problem_parts(problem)
    rule = make_quadrature(opts.quad_degree)
    spaces = SpacePair(mesh, opts.element)
    solver = solve_fully_discrete if opts.scheme == FULLY else solve_semidiscrete
    res = solver(mesh, spaces, data, opts.optimizer(), rule)
    st = state_indicators(mesh, spaces, res.control, res.velocity, res.pressure, data.f, rule)
    adj = adjoint_indicators(mesh, spaces, res.control, res.velocity, res.adjoint_velocity,
                             res.adjoint_pressure, data.y_omega, rule)
    if opts.scheme == SEMI:
        ct = control_indicators(res.control, res.control, rule)
    else:
        u_breve = ControlField.implicit(res.velocity, res.adjoint_velocity,
                                        data.alpha, data.a, data.b)
        ct = control_indicators(res.control, u_breve, rule)
    total, per_cell = total_estimator(st, adj, ct)
    est = {"estSt": st.estimator, "estAdj": adj.estimator, "estCt": ct.estimator,
           "estTotal": total}
    rec = LevelRecord(level, mesh, spaces, res, est, per_cell,
                      {"state": st, "adjoint": adj, "control": ct},
                      ndof=spaces.ndof(control=opts.scheme == FULLY))
    rec.oscillation = {"f": oscillation(data.f, mesh, rule=rule).total,
                       "y_omega": oscillation(data.y_omega, mesh, rule=rule).total}
    if exact is not None:
        rec.errors = exact_errors(exact, res, rule)
    # assembler caches are rebuilt on demand; records of long runs stay small
    spaces.__dict__.pop("_assemblers", None)
    mesh.__dict__.pop("_edge_geom", None)
    rec.wall_time = time.perf_counter() - t0
    return rec


def adaptive_loop(initial_mesh, problem, opts, callback=None):
    """Solve, estimate, mark (maximum strategy) and bisect, level by level."""
    if opts.maxLevels < 1:
        raise ValueError("maxLevels must be at least 1")
    mesh = initial_mesh
    records = []
    for level in range(opts.maxLevels):
        rec = solve_level(mesh, problem, opts, level)
        records.append(rec)
        log.info("level %d cells %d ndof %d est %.4e", level, mesh.n_cells, rec.ndof,
                 rec.estimators["estTotal"])
        if callback is not None:
            callback(rec)
        if level + 1 == opts.maxLevels:
            break
        marked = mark_max_strategy(np.sqrt(rec.per_cell), opts.theta)
        new_mesh, _ = bisect(mesh, marked)
        if SpacePair(new_mesh, opts.element).ndof(opts.scheme == FULLY) > opts.ndof_cap:
            log.info("Ndof cap %d reached", opts.ndof_cap)
            break
        mesh = new_mesh
    return records
