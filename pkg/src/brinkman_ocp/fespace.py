"""
Finite element spaces on triangles.

Basis functions are written as polynomials in the barycentric coordinates
``lam = (lam0, lam1, lam2)``; physical derivatives follow from the chain rule
with the (cellwise constant) gradients of the barycentric coordinates, so the
same code evaluates values, gradients and Hessians for every element.

Vector-valued velocity fields store their two components in consecutive
blocks: dof ``d`` of component ``c`` has global index ``c * n + d`` with
``n`` the scalar dof count.
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MINI = "mini"
TAYLOR_HOOD = "th"


# -- quadrature ------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference triangle in barycentric form.

    ``weights`` sum to 1/2, the area of the reference triangle; the
    integral over a physical cell ``K`` is ``2 |K| sum_q w_q f(x_q)``.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def make_quadrature(degree=10):
    """Fully symmetric Xiao--Gimbutas rule exact for polynomials of ``degree``."""
    import basix

    if not isinstance(degree, (int, np.integer)) or not 1 <= degree <= 20:
        raise ValueError(f"unsupported quadrature degree {degree!r}; "
                         "expected an integer in 1..20")
    pts, w = basix.make_quadrature(basix.CellType.triangle, int(degree),
                                   basix.QuadratureType.xiao_gimbutas)
    bary = np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
    bary.setflags(write=False)
    w = np.array(w, dtype=float)
    w.setflags(write=False)
    return QuadratureRule(bary, w, int(degree))


@lru_cache(maxsize=None)
def gauss_line(n_points):
    """Gauss--Legendre rule on [0, 1]; exact to degree ``2 n - 1``."""
    x, w = np.polynomial.legendre.leggauss(n_points)
    return 0.5 * (x + 1.0), 0.5 * w


# -- reference elements ----------------------------------------------------

class Element:
    """Scalar reference element expressed in barycentric coordinates."""

    name = "element"
    n_local = 0

    def values(self, lam):
        raise NotImplementedError

    def dlam(self, lam):
        raise NotImplementedError

    def d2lam(self, lam):
        raise NotImplementedError

    def dofmap(self, mesh):
        raise NotImplementedError

    def boundary_dofs(self, mesh):
        raise NotImplementedError


class P1(Element):
    name = "P1"
    n_local = 3
    nodes = np.eye(3)

    def values(self, lam):
        return np.array(lam, dtype=float, copy=True)

    def dlam(self, lam):
        lam = np.asarray(lam)
        return np.broadcast_to(np.eye(3), lam.shape[:-1] + (3, 3)).copy()

    def d2lam(self, lam):
        lam = np.asarray(lam)
        return np.zeros(lam.shape[:-1] + (3, 3, 3))

    def dofmap(self, mesh):
        return np.array(mesh.cells), mesh.n_vertices

    def boundary_dofs(self, mesh):
        return np.array(mesh.boundary_vertices)


# local edge i joins the two vertices other than i
_EDGE_VERTS = ((1, 2), (2, 0), (0, 1))


class P2(Element):
    name = "P2"
    n_local = 6
    nodes = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1],
                      [0, .5, .5], [.5, 0, .5], [.5, .5, 0]])

    def values(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = np.empty(lam.shape[:-1] + (6,))
        for i in range(3):
            out[..., i] = lam[..., i] * (2.0 * lam[..., i] - 1.0)
        for e, (j, k) in enumerate(_EDGE_VERTS):
            out[..., 3 + e] = 4.0 * lam[..., j] * lam[..., k]
        return out

    def dlam(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = np.zeros(lam.shape[:-1] + (6, 3))
        for i in range(3):
            out[..., i, i] = 4.0 * lam[..., i] - 1.0
        for e, (j, k) in enumerate(_EDGE_VERTS):
            out[..., 3 + e, j] = 4.0 * lam[..., k]
            out[..., 3 + e, k] = 4.0 * lam[..., j]
        return out

    def d2lam(self, lam):
        lam = np.asarray(lam)
        out = np.zeros(lam.shape[:-1] + (6, 3, 3))
        for i in range(3):
            out[..., i, i, i] = 4.0
        for e, (j, k) in enumerate(_EDGE_VERTS):
            out[..., 3 + e, j, k] = 4.0
            out[..., 3 + e, k, j] = 4.0
        return out

    def dofmap(self, mesh):
        return (np.hstack([mesh.cells, mesh.n_vertices + mesh.cell_edges]),
                mesh.n_vertices + mesh.n_edges)

    def boundary_dofs(self, mesh):
        return np.concatenate([mesh.boundary_vertices,
                               mesh.n_vertices + np.flatnonzero(mesh.boundary)])


class P1Bubble(Element):
    """P1 plus the cubic bubble ``27 lam0 lam1 lam2`` (mini element velocity)."""

    name = "P1+B3"
    n_local = 4

    def values(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = np.empty(lam.shape[:-1] + (4,))
        out[..., :3] = lam
        out[..., 3] = 27.0 * lam[..., 0] * lam[..., 1] * lam[..., 2]
        return out

    def dlam(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = np.zeros(lam.shape[:-1] + (4, 3))
        out[..., :3, :] = np.eye(3)
        out[..., 3, 0] = 27.0 * lam[..., 1] * lam[..., 2]
        out[..., 3, 1] = 27.0 * lam[..., 0] * lam[..., 2]
        out[..., 3, 2] = 27.0 * lam[..., 0] * lam[..., 1]
        return out

    def d2lam(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = np.zeros(lam.shape[:-1] + (4, 3, 3))
        for i in range(3):
            for j in range(3):
                if i != j:
                    out[..., 3, i, j] = 27.0 * lam[..., 3 - i - j]
        return out

    def dofmap(self, mesh):
        nv = mesh.n_vertices
        bubbles = nv + np.arange(mesh.n_cells)[:, None]
        return np.hstack([mesh.cells, bubbles]), nv + mesh.n_cells

    def boundary_dofs(self, mesh):
        return np.array(mesh.boundary_vertices)


def velocity_element(family):
    if family == MINI:
        return P1Bubble()
    if family == TAYLOR_HOOD:
        return P2()
    raise ValueError(f"unknown element family {family!r}; use 'mini' or 'th'")


# -- spaces ----------------------------------------------------------------

class ScalarSpace:
    """Global scalar space built from a reference element on a mesh."""

    def __init__(self, mesh, element):
        self.mesh = mesh
        self.element = element
        self.dofmap, self.n_dofs = element.dofmap(mesh)
        self.dofmap.setflags(write=False)
        self.boundary = np.unique(element.boundary_dofs(mesh))

    def tabulate(self, rule):
        return _tabulate(self.element, rule)

    def grads(self, rule):
        """Physical basis gradients, shape (nc, nq, n_local, 2)."""
        _, dl, _ = self.tabulate(rule)
        return np.einsum("qik,ckd->cqid", dl, self.mesh.grad_lambda)

    def laplacians(self, rule):
        """Physical basis Laplacians, shape (nc, nq, n_local)."""
        _, _, d2 = self.tabulate(rule)
        g = self.mesh.grad_lambda
        gg = np.einsum("ckd,cld->ckl", g, g)
        return np.einsum("qikl,ckl->cqi", d2, gg)


_TAB_CACHE = {}


def _tabulate(element, rule):
    key = (element.name, rule.degree, rule.n_points)
    if key not in _TAB_CACHE:
        lam = rule.points
        _TAB_CACHE[key] = (element.values(lam), element.dlam(lam),
                           element.d2lam(lam))
    return _TAB_CACHE[key]


class SpacePair:
    """
    Velocity/pressure pair (mini element or lowest-order Taylor--Hood).

    Attributes
    ----------
    velocity : ScalarSpace
        Scalar space used for each velocity component.
    pressure : ScalarSpace
        Continuous P1.
    n_vel : int
        Number of vector velocity dofs (both components, boundary included).
    free_vel : ndarray
        Vector velocity dofs not on the Dirichlet boundary.
    """

    def __init__(self, mesh, family=MINI):
        self.mesh = mesh
        self.family = family
        self.velocity = ScalarSpace(mesh, velocity_element(family))
        self.pressure = ScalarSpace(mesh, P1())
        n = self.velocity.n_dofs
        self.n_vel = 2 * n
        self.n_pres = self.pressure.n_dofs
        b = self.velocity.boundary
        self.boundary_vel = np.concatenate([b, n + b])
        mask = np.ones(self.n_vel, dtype=bool)
        mask[self.boundary_vel] = False
        self.free_vel = np.flatnonzero(mask)

    @property
    def n_control(self):
        return self.mesh.n_cells

    def ndof(self, control=True):
        """``2 dim X_h + 2 dim M_h + dim U_h`` with Dirichlet dofs removed
        and one pressure dof taken off for the zero-mean constraint."""
        n = 2 * len(self.free_vel) + 2 * (self.n_pres - 1)
        return n + (self.mesh.n_cells if control else 0)

    def __repr__(self):
        return (f"SpacePair({self.family}, nvel={self.n_vel}, "
                f"npres={self.n_pres})")


# -- fields ----------------------------------------------------------------

@dataclass
class FieldFunction:
    """Coefficient vector on a scalar space; ``ncomp`` is 1 or 2."""

    space: ScalarSpace
    coeffs: np.ndarray
    ncomp: int = 1
    role: str = field(default="pressure")

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if len(self.coeffs) != self.ncomp * self.space.n_dofs:
            raise ValueError("coefficient length does not match the space")

    def _local(self):
        n = self.space.n_dofs
        dm = self.space.dofmap
        if self.ncomp == 1:
            return self.coeffs[dm]
        return np.stack([self.coeffs[c * n + dm] for c in range(self.ncomp)],
                        axis=-1)

    def values(self, rule):
        """Values at the quadrature points: (nc, nq) or (nc, nq, 2)."""
        phi, _, _ = self.space.tabulate(rule)
        loc = self._local()
        if self.ncomp == 1:
            return np.einsum("qi,ci->cq", phi, loc)
        return np.einsum("qi,cim->cqm", phi, loc)

    def grads(self, rule):
        """Gradients: (nc, nq, 2) or (nc, nq, 2, 2) with ``[..., comp, dir]``."""
        g = self.space.grads(rule)
        loc = self._local()
        if self.ncomp == 1:
            return np.einsum("cqid,ci->cqd", g, loc)
        return np.einsum("cqid,cim->cqmd", g, loc)

    def laplacians(self, rule):
        lap = self.space.laplacians(rule)
        loc = self._local()
        if self.ncomp == 1:
            return np.einsum("cqi,ci->cq", lap, loc)
        return np.einsum("cqi,cim->cqm", lap, loc)

    def evaluate(self, cell, bary, grad=False):
        """Evaluate at barycentric points ``bary`` (shape (..., 3)) of ``cell``."""
        el = self.space.element
        loc = self._local()[cell]
        if grad:
            dl = el.dlam(bary)
            g = np.einsum("...ik,kd->...id", dl, self.space.mesh.grad_lambda[cell])
            if self.ncomp == 1:
                return np.einsum("...id,i->...d", g, loc)
            return np.einsum("...id,im->...md", g, loc)
        phi = el.values(bary)
        if self.ncomp == 1:
            return phi @ loc
        return np.einsum("...i,im->...m", phi, loc)

    def component(self, c):
        n = self.space.n_dofs
        return FieldFunction(self.space, self.coeffs[c * n:(c + 1) * n], 1,
                             self.role)

    def dump_csv(self, path):
        """Write ``dof_id,value`` (one value column per component)."""
        n = self.space.n_dofs
        cols = self.coeffs.reshape(self.ncomp, n).T
        header = "dof_id," + ",".join(
            ["value"] if self.ncomp == 1 else [f"value_{c}" for c in "xy"[:self.ncomp]])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i, row in enumerate(cols):
                fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")


def interpolate(fn, space, ncomp=1):
    """Nodal interpolant of ``fn(x, y)`` into ``space``.

    For the P1+bubble element the bubble coefficient is chosen so that the
    interpolant matches ``fn`` at each cell barycenter.
    """
    mesh = space.mesh
    el = space.element
    n = space.n_dofs

    def ev(pts):
        v = np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float)
        if ncomp == 1:
            return v.reshape(pts.shape[:-1] + (1,))
        return v.reshape(pts.shape[:-1] + (ncomp,))

    coeffs = np.zeros((ncomp, n))
    coeffs[:, :mesh.n_vertices] = ev(mesh.vertices).T
    if isinstance(el, P2):
        mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
        coeffs[:, mesh.n_vertices:] = ev(mids).T
    elif isinstance(el, P1Bubble):
        at_c = ev(mesh.centroids)
        lin = coeffs[:, mesh.cells].mean(axis=2).T
        coeffs[:, mesh.n_vertices:] = (at_c - lin).T
    return FieldFunction(space, coeffs.ravel(), ncomp,
                         "velocity" if ncomp == 2 else "pressure")


def zero_field(space, ncomp=1):
    return FieldFunction(space, np.zeros(ncomp * space.n_dofs), ncomp,
                         "velocity" if ncomp == 2 else "pressure")


# -- integration helpers ----------------------------------------------------

def qp_weights(mesh, rule):
    """Physical quadrature weights ``2 |K| w_q``, shape (nc, nq)."""
    return 2.0 * mesh.areas[:, None] * rule.weights[None, :]


def qp_points(mesh, rule):
    return mesh.to_physical(rule.points)


def eval_at_qp(fn, mesh, rule):
    """Evaluate a callable ``fn(x, y)`` at all quadrature points."""
    x = qp_points(mesh, rule)
    return np.asarray(fn(x[..., 0], x[..., 1]), dtype=float)


def as_qp(f, mesh, rule):
    """Accept a callable, a constant, a per-cell array or a qp array."""
    if callable(f):
        return eval_at_qp(f, mesh, rule)
    f = np.asarray(f, dtype=float)
    nc, nq = mesh.n_cells, rule.n_points
    if f.ndim == 0:
        return np.full((nc, nq), float(f))
    if f.shape[0] == nc and (f.ndim == 1 or f.shape[1] != nq):
        return np.repeat(f[:, None, ...], nq, axis=1)
    if f.shape[:2] == (nc, nq):
        return f
    raise ValueError(f"cannot interpret array of shape {f.shape} as a field")


def integrate(values, mesh, rule, per_cell=False):
    w = qp_weights(mesh, rule)
    v = np.asarray(values)
    cell = np.einsum("cq,cq...->c...", w, v)
    return cell if per_cell else cell.sum(axis=0)


def project_P0(f, mesh, rule=None):
    """Cell means ``(1/|K|) int_K f`` (no clamping)."""
    rule = rule or make_quadrature()
    vals = as_qp(f, mesh, rule)
    return integrate(vals, mesh, rule, per_cell=True) / (
        mesh.areas.reshape((-1,) + (1,) * (vals.ndim - 2)))


def clamp_admissible(values, a, b):
    """Pointwise projection ``min(b, max(v, a))`` onto [a, b]."""
    if not a < b:
        raise ValueError(f"control bounds must satisfy a < b, got a={a}, b={b}")
    return np.minimum(b, np.maximum(np.asarray(values, dtype=float), a))


def pressure_mean_row(space):
    """Integrals of the P1 basis functions (``|K|/3`` per cell vertex)."""
    mesh = space.mesh
    return np.bincount(mesh.cells.ravel(),
                       weights=np.repeat(mesh.areas / 3.0, 3),
                       minlength=space.n_dofs)


def zero_mean(p):
    """Subtract the area-weighted mean of a P1 pressure field."""
    row = pressure_mean_row(p.space)
    mean = row @ p.coeffs / row.sum()
    return FieldFunction(p.space, p.coeffs - mean, 1, p.role)
