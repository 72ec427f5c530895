"""
Sparse operators of the Stokes--Brinkman saddle-point problem.

The velocity test/trial space is the free (non-Dirichlet) part of the vector
space of a :class:`~brinkman_ocp.fespace.SpacePair`. The assembled system is

    [ A   B^T  0  ] [y]   [F]
    [ B   0    m^T] [p] = [0]
    [ 0   m    0  ] [l]   [0]

with ``A_ij = (grad phi_j, grad phi_i) + (u phi_j, phi_i)``,
``B_kj = -(psi_k, div phi_j)`` and ``m_k = int psi_k``. The scalar
multiplier ``l`` enforces a zero-mean pressure.
"""
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .fespace import as_qp, make_quadrature, pressure_mean_row, qp_weights


class AdmissibilityError(ValueError):
    """The control does not belong to the admissible set."""


@dataclass
class BlockSaddleSystem:
    A: sparse.csr_matrix
    B: sparse.csr_matrix
    m: np.ndarray
    matrix: sparse.csc_matrix
    free: np.ndarray
    n_vel: int
    n_pres: int

    @property
    def size(self):
        return self.matrix.shape[0]

    def split(self, x):
        """Return full velocity vector, pressure coefficients and multiplier."""
        nf = len(self.free)
        y = np.zeros(self.n_vel)
        y[self.free] = x[:nf]
        return y, x[nf:nf + self.n_pres], x[-1]

    def rhs(self, vel_load):
        """Saddle right-hand side from a full-length velocity load vector."""
        b = np.zeros(self.size)
        b[:len(self.free)] = np.asarray(vel_load)[self.free]
        return b


def _sym(local):
    # bitwise symmetric local matrices give bitwise symmetric global ones
    return 0.5 * (local + local.transpose(0, 2, 1))


class _Scatter:
    """Cached COO -> CSR summation for (nc, n_loc, n_loc) local matrices."""

    def __init__(self, rows, cols, shape):
        r = rows.ravel()
        c = cols.ravel()
        keys = r.astype(np.int64) * shape[1] + c
        ukeys, self.inverse = np.unique(keys, return_inverse=True)
        self.rows = ukeys // shape[1]
        self.cols = ukeys % shape[1]
        self.n = len(ukeys)
        self.shape = shape
        pattern = sparse.csr_matrix(
            (np.arange(self.n, dtype=float) + 1, (self.rows, self.cols)),
            shape=shape)
        # positions of unique entries inside the CSR data array
        self._perm = (pattern.data - 1).astype(np.int64)
        self._indptr = pattern.indptr
        self._indices = pattern.indices

    def __call__(self, local):
        summed = np.bincount(self.inverse, weights=np.asarray(local).ravel(),
                             minlength=self.n)
        return sparse.csr_matrix((summed[self._perm], self._indices.copy(),
                                  self._indptr.copy()), shape=self.shape)


class Assembler:
    """Control-independent data for one :class:`SpacePair` and quadrature rule.

    Stiffness and divergence blocks are assembled once; only the reaction
    (mass) term is rebuilt for each control.
    """

    def __init__(self, spaces, rule=None):
        self.spaces = spaces
        self.rule = rule or make_quadrature()
        mesh = spaces.mesh
        V = spaces.velocity
        Q = spaces.pressure
        self.w = qp_weights(mesh, self.rule)
        self.phi, _, _ = V.tabulate(self.rule)
        self.psi, _, _ = Q.tabulate(self.rule)
        self.gphi = V.grads(self.rule)
        dm = V.dofmap
        self._scalar = _Scatter(np.repeat(dm[:, :, None], dm.shape[1], axis=2),
                                np.repeat(dm[:, None, :], dm.shape[1], axis=1),
                                (V.n_dofs, V.n_dofs))
        k_loc = _sym(np.einsum("cq,cqid,cqjd->cij", self.w, self.gphi, self.gphi))
        self.stiffness = self._scalar(k_loc)

        n = V.n_dofs
        qdm = Q.dofmap
        blocks = []
        for c in range(2):
            b_loc = -np.einsum("cq,qk,cqj->ckj", self.w, self.psi,
                               self.gphi[..., c])
            sc = _Scatter(np.repeat(qdm[:, :, None], dm.shape[1], axis=2),
                          np.repeat(dm[:, None, :] + c * n, qdm.shape[1], axis=1),
                          (Q.n_dofs, 2 * n))
            blocks.append(sc(b_loc))
        self.B_full = (blocks[0] + blocks[1]).tocsr()
        self.free = spaces.free_vel
        self.B = self.B_full[:, self.free].tocsr()
        self.m = pressure_mean_row(Q)
        self._mass_1 = None

    # -- matrices ---------------------------------------------------------
    def mass(self, coeff=1.0):
        """Scalar weighted mass matrix ``(coeff phi_j, phi_i)``."""
        cq = as_qp(coeff, self.spaces.mesh, self.rule)
        m_loc = _sym(np.einsum("cq,qi,qj->cij", self.w * cq, self.phi, self.phi))
        return self._scalar(m_loc)

    @property
    def mass_1(self):
        if self._mass_1 is None:
            self._mass_1 = self.mass(1.0)
        return self._mass_1

    def vector_mass(self, coeff=1.0):
        M = self.mass(coeff)
        return sparse.block_diag([M, M], format="csr")

    def system(self, control, bounds=None):
        cq = control_at_qp(control, self.spaces.mesh, self.rule)
        check_admissible(cq, bounds)
        S = self.stiffness + self.mass(cq)
        A_full = sparse.block_diag([S, S], format="csr")
        A = A_full[self.free][:, self.free].tocsr()
        B = self.B
        m = sparse.csr_matrix(self.m[None, :])
        K = sparse.bmat([[A, B.T, None], [B, None, m.T], [None, m, None]],
                        format="csc")
        return BlockSaddleSystem(A, B, self.m.copy(), K, self.free,
                                 self.spaces.n_vel, self.spaces.n_pres)

    # -- load vectors -----------------------------------------------------
    def load(self, fq):
        """Full velocity load ``(f, phi_i)`` from qp values (nc, nq, 2)."""
        V = self.spaces.velocity
        n = V.n_dofs
        out = np.zeros(2 * n)
        for c in range(2):
            loc = np.einsum("cq,qi,cq->ci", self.w, self.phi, fq[..., c])
            out[c * n:(c + 1) * n] = np.bincount(V.dofmap.ravel(), loc.ravel(),
                                                 minlength=n)
        return out

    def scalar_load(self, gq):
        """Pressure-space load ``(g, psi_k)`` from qp values (nc, nq)."""
        Q = self.spaces.pressure
        loc = np.einsum("cq,qk,cq->ck", self.w, self.psi, gq)
        return np.bincount(Q.dofmap.ravel(), loc.ravel(), minlength=Q.n_dofs)


def control_at_qp(control, mesh, rule):
    """Control values at quadrature points, shape (nc, nq)."""
    if hasattr(control, "at_quadrature"):
        return control.at_quadrature(rule)
    return as_qp(control, mesh, rule)


def check_admissible(cq, bounds=None, rtol=1e-12):
    cq = np.asarray(cq)
    if not np.all(np.isfinite(cq)):
        raise AdmissibilityError("control has non-finite values")
    if bounds is None:
        if np.any(cq <= 0.0):
            raise AdmissibilityError("control must be strictly positive")
        return
    a, b = bounds
    slack = rtol * max(abs(a), abs(b))
    if cq.min() < a - slack or cq.max() > b + slack:
        raise AdmissibilityError(
            f"control range [{cq.min():.6g}, {cq.max():.6g}] leaves [{a}, {b}]")


def _assembler(spaces, rule):
    rule = rule or make_quadrature()
    cache = spaces.__dict__.setdefault("_assemblers", {})
    key = (rule.degree, rule.n_points)
    if key not in cache:
        cache[key] = Assembler(spaces, rule)
    return cache[key]


def assemble_system(spaces, control, rule=None, bounds=None):
    """Assemble the state/adjoint saddle-point operator for ``control``.

    ``control`` may be a constant, per-cell values, values at quadrature
    points, or an object exposing ``at_quadrature(rule)``; when it carries
    ``bounds`` (or ``bounds`` is given) admissibility is enforced against
    them.
    """
    if bounds is None:
        bounds = getattr(control, "bounds", None)
    return _assembler(spaces, rule).system(control, bounds)


def _vel_qp(y, rule):
    return y.values(rule)


def assemble_state_rhs(spaces, f, rule=None):
    """Right-hand side ``(f, v_h)`` of the state equations."""
    asm = _assembler(spaces, rule)
    fq = as_qp(f, spaces.mesh, asm.rule)
    load = asm.load(fq)
    return _finish(asm, load)


def assemble_adjoint_rhs(spaces, y_h, y_omega, rule=None):
    """Right-hand side ``(y_h - y_Omega, v_h)`` of the adjoint equations."""
    asm = _assembler(spaces, rule)
    dq = _vel_qp(y_h, asm.rule) - as_qp(y_omega, spaces.mesh, asm.rule)
    return _finish(asm, asm.load(dq))


def assemble_linearized_rhs(spaces, v, y_h, rule=None):
    """Right-hand side ``-(v y_h, v_h)`` of the linearized state equations."""
    asm = _assembler(spaces, rule)
    vq = as_qp(v, spaces.mesh, asm.rule)
    return _finish(asm, asm.load(-vq[..., None] * _vel_qp(y_h, asm.rule)))


def assemble_second_order_rhs(spaces, v1, phi2, v2, phi1, rule=None):
    """Right-hand side ``-(v2 phi_1, v_h) - (v1 phi_2, v_h)`` of the
    second-derivative problem."""
    asm = _assembler(spaces, rule)
    m = spaces.mesh
    v1q = as_qp(v1, m, asm.rule)[..., None]
    v2q = as_qp(v2, m, asm.rule)[..., None]
    gq = -(v2q * phi1.values(asm.rule) + v1q * phi2.values(asm.rule))
    return _finish(asm, asm.load(gq))


def _finish(asm, load):
    nf = len(asm.free)
    b = np.zeros(nf + asm.spaces.n_pres + 1)
    b[:nf] = load[asm.free]
    return b


def local_matrices(spaces, control, rule=None):
    """Per-cell scalar reaction-diffusion matrices (nc, n_loc, n_loc)."""
    asm = _assembler(spaces, rule)
    cq = control_at_qp(control, spaces.mesh, asm.rule)
    k = np.einsum("cq,cqid,cqjd->cij", asm.w, asm.gphi, asm.gphi)
    m = np.einsum("cq,qi,qj->cij", asm.w * cq, asm.phi, asm.phi)
    return k + m


def dump_coo(matrix, path):
    """Debug dump ``i j value`` (not a stable format)."""
    coo = sparse.coo_matrix(matrix)
    with open(path, "w") as fh:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v!r}\n")
