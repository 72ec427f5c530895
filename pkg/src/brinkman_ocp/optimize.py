"""
Reduced optimal control problem for the bilinear Stokes--Brinkman control.

The control ``u`` enters the state equation as a reaction coefficient. Two
discretizations of the control are supported:

* ``fully``: piecewise constant controls, one value per cell;
* ``semi``: variational discretization. The control is never discretized
  and is represented by its values at the quadrature points. At the optimum
  it is the implicit field ``clip(y_h . z_h / alpha, a, b)``.

Both run through :class:`ReducedProblem`, which works on a flat control
vector with weights ``W`` (cell areas or quadrature weights) and provides
the cost, the gradient density ``alpha u - P(y.z)``, Hessian-vector
information and the projection map ``T(u) = clip(P(y.z) / alpha, a, b)``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import linalg as spla

from .assembly import control_at_qp
from .fespace import FieldFunction, as_qp, clamp_admissible, make_quadrature, qp_weights
from .pde import StokesOperator

log = logging.getLogger(__name__)

FULLY = "fully"
SEMI = "semi"


class IterationLimitError(RuntimeError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"optimizer stopped after {iterations} iterations; "
                         f"last residual {residual:.3e}")


@dataclass(frozen=True)
class ProblemData:
    f: object
    y_omega: object
    alpha: float
    a: float
    b: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.a < self.b:
            raise ValueError(f"bounds must satisfy 0 < a < b, got a={self.a}, b={self.b}")


class ControlField:
    """A control: per-cell values (``P0``) or the implicit projection of
    ``y_h . z_h / alpha`` (``Implicit``)."""

    P0 = "P0"
    IMPLICIT = "Implicit"

    def __init__(self, kind, mesh, a, b, alpha, values=None, y_h=None, z_h=None):
        self.kind = kind
        self.mesh = mesh
        self.a, self.b, self.alpha = float(a), float(b), float(alpha)
        if kind == self.P0:
            v = np.asarray(values, dtype=float)
            if v.shape != (mesh.n_cells,):
                raise ValueError("P0 control needs one value per cell")
            self.values = v
        elif kind == self.IMPLICIT:
            self.y_h, self.z_h = y_h, z_h
        else:
            raise ValueError(f"unknown control kind {kind!r}")

    @classmethod
    def p0(cls, mesh, values, a, b, alpha=1.0):
        return cls(cls.P0, mesh, a, b, alpha, values=values)

    @classmethod
    def implicit(cls, y_h, z_h, alpha, a, b):
        return cls(cls.IMPLICIT, y_h.space.mesh, a, b, alpha, y_h=y_h, z_h=z_h)

    @property
    def bounds(self):
        return (self.a, self.b)

    def at_quadrature(self, rule):
        if self.kind == self.P0:
            return np.repeat(self.values[:, None], rule.n_points, axis=1)
        yz = (self.y_h.values(rule) * self.z_h.values(rule)).sum(axis=-1)
        return np.clip(yz / self.alpha, self.a, self.b)

    def evaluate(self, cell, bary):
        if self.kind == self.P0:
            return np.broadcast_to(self.values[cell], np.shape(bary)[:-1])
        yz = (self.y_h.evaluate(cell, bary) * self.z_h.evaluate(cell, bary)).sum(axis=-1)
        return np.clip(yz / self.alpha, self.a, self.b)


@dataclass
class OptimalityReport:
    J: float
    viResidual: float
    fixedPointResidual: float
    iterations: int
    activeSetFractions: tuple
    method: str = "newton"
    history: list = field(default_factory=list, repr=False)


@dataclass
class OptimizerOptions:
    tol: float = 1e-10
    maxIter: int = 200
    method: str = "newton"          # or "fixed_point"
    u0: object = None
    armijo: float = 1e-4
    min_step: float = 2.0 ** -30


@dataclass
class OptimalControlResult:
    control: ControlField
    velocity: FieldFunction
    pressure: FieldFunction
    adjoint_velocity: FieldFunction
    adjoint_pressure: FieldFunction
    report: OptimalityReport
    state: object = None
    adjoint: object = None
    scheme: str = FULLY

    def __iter__(self):
        return iter((self.control, self.velocity, self.pressure,
                     self.adjoint_velocity, self.adjoint_pressure, self.report))


# -- pointwise formulas --------------------------------------------------

def cost(y_h, control, y_omega, alpha, rule=None):
    """``J = 1/2 |y_h - y_omega|^2 + alpha/2 |u|^2`` by quadrature."""
    rule = rule or make_quadrature()
    mesh = y_h.space.mesh if hasattr(y_h, "space") else control.mesh
    w = qp_weights(mesh, rule)
    yq = y_h.values(rule) if hasattr(y_h, "values") else as_qp(y_h, mesh, rule)
    d = yq - as_qp(y_omega, mesh, rule)
    uq = control_at_qp(control, mesh, rule)
    return float(0.5 * np.sum(w * (d ** 2).sum(-1)) + 0.5 * alpha * np.sum(w * uq ** 2))


class _QPDensity:
    """Pointwise gradient density ``alpha u - y_h . z_h``."""

    def __init__(self, y_h, z_h, control, alpha):
        self.y_h, self.z_h, self.control, self.alpha = y_h, z_h, control, alpha

    def at_quadrature(self, rule):
        mesh = self.y_h.space.mesh
        yz = (self.y_h.values(rule) * self.z_h.values(rule)).sum(-1)
        return self.alpha * control_at_qp(self.control, mesh, rule) - yz


def reduced_gradient_density(y_h, z_h, control, alpha, rule=None):
    """Per-cell ``P_K(alpha u - y_h . z_h)`` for P0 controls; a pointwise
    object with ``at_quadrature`` otherwise."""
    dens = _QPDensity(y_h, z_h, control, alpha)
    if getattr(control, "kind", None) == ControlField.P0:
        rule = rule or make_quadrature()
        mesh = y_h.space.mesh
        w = qp_weights(mesh, rule)
        return (w * dens.at_quadrature(rule)).sum(axis=1) / mesh.areas
    return dens


def vi_residual(control, density, a=None, b=None, scale_tol=1e-13):
    """Violation of the discrete variational inequality.

    ``control`` and ``density`` are arrays of matching shape (or a
    :class:`ControlField` of kind P0 with bounds). Interior entries
    contribute ``|d|``, entries at ``a`` contribute ``max(0, -d)`` and
    entries at ``b`` contribute ``max(0, d)``.
    """
    if isinstance(control, ControlField):
        a, b = control.bounds
        control = control.values
    u = np.asarray(control, dtype=float)
    d = np.asarray(density, dtype=float)
    eps = scale_tol * max(abs(a), abs(b))
    at_a = u <= a + eps
    at_b = u >= b - eps
    r = np.abs(d)
    r = np.where(at_a, np.maximum(0.0, -d), r)
    r = np.where(at_b, np.maximum(0.0, d), r)
    return float(r.max()) if r.size else 0.0


def hessian_quadratic_form(u, v, phi, z_h, alpha, rule=None):
    """``alpha |v|^2 - 2 (v phi, z_h) + |phi|^2`` where ``phi`` is the
    linearized state in direction ``v`` and ``z_h`` the adjoint at ``u``."""
    rule = rule or make_quadrature()
    mesh = phi.space.mesh
    w = qp_weights(mesh, rule)
    vq = control_at_qp(v, mesh, rule)
    pq = phi.values(rule)
    zq = z_h.values(rule)
    return float(alpha * np.sum(w * vq ** 2) - 2.0 * np.sum(w * vq * (pq * zq).sum(-1))
                 + np.sum(w * (pq ** 2).sum(-1)))


# -- reduced problem -----------------------------------------------------

@dataclass
class _Eval:
    u: np.ndarray
    op: StokesOperator
    state: object
    adjoint: object
    yq: np.ndarray
    zq: np.ndarray
    J: float
    G: np.ndarray


class ReducedProblem:
    """``u -> j(u)`` with all state/adjoint solves hidden.

    Control vectors have shape ``(nc,)`` for ``scheme="fully"`` and
    ``(nc, nq)`` for ``scheme="semi"``.
    """

    def __init__(self, spaces, data, scheme=FULLY, rule=None):
        if scheme not in (FULLY, SEMI):
            raise ValueError(f"scheme must be 'fully' or 'semi', got {scheme!r}")
        self.spaces = spaces
        self.data = data
        self.scheme = scheme
        self.rule = rule or make_quadrature()
        mesh = spaces.mesh
        self.mesh = mesh
        self.w = qp_weights(mesh, self.rule)
        self.W = mesh.areas.copy() if scheme == FULLY else self.w
        self.fq = as_qp(data.f, mesh, self.rule)
        self.yoq = as_qp(data.y_omega, mesh, self.rule)
        self.bounds = (data.a, data.b)
        self._cache = []
        self.n_solves = 0

    # vectors
    @property
    def shape(self):
        return self.W.shape

    def to_qp(self, u):
        u = np.asarray(u, dtype=float)
        if self.scheme == FULLY:
            return np.repeat(u[:, None], self.rule.n_points, axis=1)
        return u

    def project(self, gq):
        """Cell means for the fully discrete scheme, identity otherwise."""
        if self.scheme == FULLY:
            return (self.w * gq).sum(axis=1) / self.mesh.areas
        return gq

    def inner(self, u, v):
        return float(np.sum(self.W * u * v))

    def norm(self, u):
        return np.sqrt(max(self.inner(u, u), 0.0))

    def clip(self, v):
        return clamp_admissible(v, self.data.a, self.data.b)

    def initial(self, u0=None):
        if u0 is None:
            return np.full(self.shape, 0.5 * (self.data.a + self.data.b))
        if callable(u0):
            uq = as_qp(u0, self.mesh, self.rule)
            return self.project(uq) if self.scheme == FULLY else uq
        u0 = np.asarray(u0, dtype=float)
        return np.broadcast_to(u0 if u0.ndim else u0[()], self.shape).copy() \
            if u0.shape != self.shape else u0.copy()

    # solves
    def evaluate(self, u):
        u = np.asarray(u, dtype=float)
        for ev in self._cache:
            if ev.u.shape == u.shape and np.array_equal(ev.u, u):
                return ev
        uq = self.to_qp(u)
        op = StokesOperator(self.spaces, uq, self.rule, self.bounds)
        st = op.velocity_load(self.fq)
        yq = st.velocity.values(self.rule)
        ad = op.velocity_load(yq - self.yoq, sign=-1.0)
        zq = ad.velocity.values(self.rule)
        self.n_solves += 2
        J = 0.5 * np.sum(self.w * ((yq - self.yoq) ** 2).sum(-1)) \
            + 0.5 * self.data.alpha * np.sum(self.w * uq ** 2)
        G = self.project((yq * zq).sum(-1)) / self.data.alpha
        ev = _Eval(u.copy(), op, st, ad, yq, zq, float(J), G)
        self._cache = [ev] + self._cache[:1]
        return ev

    def _check_bounds(self, u):
        a, b = self.data.a, self.data.b
        slack = 1e-12 * b
        if np.min(u) < a - slack or np.max(u) > b + slack:
            raise ValueError("control leaves the admissible set")

    def j(self, u):
        return self.evaluate(u).J

    def density(self, ev):
        return self.data.alpha * (ev.u - ev.G)

    def gradient(self, u):
        """Riesz representative of ``j'(u)`` in the ``W`` inner product."""
        return self.density(self.evaluate(u))

    def linearized(self, ev, v):
        vq = self.to_qp(v)
        return ev.op.velocity_load(-vq[..., None] * ev.yq)

    def adjoint_derivative(self, ev, v, phi):
        vq = self.to_qp(v)
        pq = phi.velocity.values(self.rule)
        return ev.op.velocity_load(pq - vq[..., None] * ev.zq, sign=-1.0)

    def G_prime(self, ev, v):
        """Derivative of ``P(y.z)/alpha`` in direction ``v``."""
        phi = self.linearized(ev, v)
        psi = self.adjoint_derivative(ev, v, phi)
        self.n_solves += 2
        pq = phi.velocity.values(self.rule)
        sq = psi.velocity.values(self.rule)
        return self.project((pq * ev.zq + ev.yq * sq).sum(-1)) / self.data.alpha

    def hessian(self, u, v):
        """``j''(u)[v, v]``."""
        ev = self.evaluate(u)
        phi = self.linearized(ev, v)
        return hessian_quadratic_form(ev.u, self.to_qp(v), phi.velocity, ev.adjoint.velocity,
                                      self.data.alpha, self.rule)

    def state_map(self, u):
        """Discrete state at control ``u`` (no adjoint solve)."""
        uq = self.to_qp(u)
        return StokesOperator(self.spaces, uq, self.rule, self.bounds).velocity_load(self.fq)

    # diagnostics
    def residuals(self, ev):
        T = self.clip(ev.G)
        F = ev.u - T
        fp = float(np.abs(F).max()) if self.scheme == FULLY else self.norm(F)
        vi = vi_residual(ev.u, self.density(ev), self.data.a, self.data.b)
        return T, F, fp, vi


# -- iterations ----------------------------------------------------------

def _armijo(rp, ev, T, opts):
    """Damped projection step ``u + s (T - u)`` with backtracking on ``J``."""
    d = T - ev.u
    slope = rp.inner(rp.density(ev), d)
    s = 1.0
    while True:
        cand = rp.clip(ev.u + s * d)
        new = rp.evaluate(cand)
        if new.J <= ev.J + opts.armijo * s * slope + 1e-12 * abs(ev.J):
            return new, s
        if s <= opts.min_step:
            log.warning("line search reached the minimal step %.2e", s)
            return new, s
        s *= 0.5


def _newton_step(rp, ev, T, F):
    """Semismooth Newton step for ``u - clip(G(u)) = 0``."""
    a, b = rp.data.a, rp.data.b
    inactive = (ev.G > a) & (ev.G < b)
    delta = -F.copy()
    idx = np.flatnonzero(inactive.ravel())
    if idx.size:
        sw = np.sqrt(rp.W.ravel()[idx])
        rhs = -F.ravel()[idx]
        act = delta.copy()
        act.ravel()[idx] = 0.0
        if np.any(act):
            rhs = rhs + rp.G_prime(ev, act).ravel()[idx]

        def matvec(xs):
            full = np.zeros(rp.shape)
            full.ravel()[idx] = xs / sw
            out = xs / sw - rp.G_prime(ev, full).ravel()[idx]
            return out * sw

        n = idx.size
        A = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
        fnorm = rp.norm(F)
        rtol = min(1e-2, max(fnorm, 1e-14))
        x, info = spla.gmres(A, rhs * sw, rtol=rtol, atol=0.0, restart=60, maxiter=10)
        delta.ravel()[idx] = x / sw
        if info < 0:
            return None
    return rp.clip(ev.u + delta)


def _run(rp, opts):
    u = rp.initial(opts.u0)
    rp._check_bounds(u)
    ev = rp.evaluate(u)
    history = []
    fp = vi = np.inf
    for it in range(opts.maxIter + 1):
        T, F, fp, vi = rp.residuals(ev)
        history.append((it, ev.J, fp, vi))
        log.debug("iter %d J=%.12e fp=%.3e vi=%.3e", it, ev.J, fp, vi)
        if fp <= opts.tol and vi <= opts.tol:
            return ev, it, fp, vi, history
        if it == opts.maxIter:
            break
        if fp <= opts.tol:
            ev = rp.evaluate(T)
            continue
        new = None
        if opts.method == "newton":
            cand = _newton_step(rp, ev, T, F)
            if cand is not None:
                trial = rp.evaluate(cand)
                _, F_new, _, _ = rp.residuals(trial)
                if rp.norm(F_new) < (1.0 - 1e-4) * rp.norm(F):
                    new = trial
        elif opts.method != "fixed_point":
            raise ValueError(f"unknown method {opts.method!r}")
        if new is None:
            new, _ = _armijo(rp, ev, T, opts)
        ev = new
    raise IterationLimitError(opts.maxIter, max(fp, vi))


def _opts(opts):
    if opts is None:
        return OptimizerOptions()
    if isinstance(opts, dict):
        return OptimizerOptions(**opts)
    return opts


def _fractions(u, a, b, weights):
    eps = 1e-13 * b
    tot = weights.sum()
    fa = float(weights[u <= a + eps].sum() / tot)
    fb = float(weights[u >= b - eps].sum() / tot)
    return (fa, fb, max(0.0, 1.0 - fa - fb))


def _solve(mesh, spaces, data, opts, scheme, rule):
    if mesh is not spaces.mesh:
        raise ValueError("spaces were built on a different mesh")
    opts = _opts(opts)
    rp = ReducedProblem(spaces, data, scheme, rule)
    ev, it, fp, vi, hist = _run(rp, opts)
    report = OptimalityReport(J=ev.J, viResidual=vi, fixedPointResidual=fp,
                              iterations=it,
                              activeSetFractions=_fractions(ev.u, data.a, data.b, rp.W),
                              method=opts.method, history=hist)
    if scheme == FULLY:
        control = ControlField.p0(mesh, ev.u, data.a, data.b, data.alpha)
    else:
        control = ControlField.implicit(ev.state.velocity, ev.adjoint.velocity,
                                        data.alpha, data.a, data.b)
    return OptimalControlResult(control, ev.state.velocity, ev.state.pressure,
                                ev.adjoint.velocity, ev.adjoint.pressure, report,
                                ev.state, ev.adjoint, scheme)


def solve_fully_discrete(mesh, spaces, data, opts=None, rule=None):
    """Optimal piecewise constant control and its state/adjoint pairs."""
    return _solve(mesh, spaces, data, opts, FULLY, rule)


def solve_semidiscrete(mesh, spaces, data, opts=None, rule=None):
    """Variationally discretized optimal control.

    The returned control is the implicit field built from the final state and
    adjoint velocities; it differs from the last iterate by at most the
    fixed-point tolerance.
    """
    return _solve(mesh, spaces, data, opts, SEMI, rule)
