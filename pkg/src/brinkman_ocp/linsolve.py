"""Direct sparse solves of the saddle-point systems.

Saddle systems are factored as ``L D L^T`` (QDLDL, AMD ordering) after a
tiny negative shift of the pressure block and a positive one of the
zero-mean multiplier, which makes them quasi-definite. Shifts are scaled row
by row with a diagonal estimate of the Schur complement. Iterative refinement
against the unshifted matrix removes the shift error; if it stalls, GMRES
preconditioned by the same factors takes over. General matrices, and saddle
systems where both routes fail, go through SuperLU. Every solve is audited
against the relative residual bound ``RESIDUAL_TOL``.
"""
import numpy as np
import qdldl
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as spla

RESIDUAL_TOL = 1e-9
PIVOT_RTOL = 1e-14
REFINE_TARGET = 1e-13
KRYLOV_TRIGGER = 1e-11      # refinement floors near 1e-13 are roundoff, not stagnation
DUAL_SHIFT = 1e-10
_DENSE_PROBE_MAX = 4000


class SingularSystemError(ArithmeticError):
    def __init__(self, pivot, detail=""):
        self.pivot = pivot
        msg = f"singular system: zero pivot at index {pivot}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class SolverAccuracyError(ArithmeticError):
    def __init__(self, residual):
        self.residual = residual
        super().__init__(f"relative residual {residual:.3e} exceeds {RESIDUAL_TOL:g}")


def _dense_zero_pivot(K):
    """First column index whose LU pivot vanishes (dense, small systems)."""
    d = K.toarray()
    _, piv_u = scipy.linalg.lu(d, permute_l=True)
    diag = np.abs(np.diag(piv_u))
    scale = max(np.abs(d).max(), 1.0)
    bad = np.flatnonzero(diag <= PIVOT_RTOL * scale * d.shape[0])
    return int(bad[0]) if len(bad) else -1


class Factorization:
    """Immutable factors of one square sparse matrix.

    ``solve`` only reads the factors, so one instance may serve concurrent
    callers.
    """

    def __init__(self, matrix, n_primal=None, n_multipliers=0):
        K = sparse.csc_matrix(matrix, dtype=float)
        if K.shape[0] != K.shape[1]:
            raise ValueError(f"matrix must be square, got {K.shape}")
        K.sum_duplicates()
        K.sort_indices()
        self.matrix = K
        self.n = K.shape[0]
        self.method = "superlu"
        self._lu = None
        if n_primal is not None and self._try_ldl(n_primal, n_multipliers):
            return
        self._init_lu()

    def _try_ldl(self, n_primal, n_multipliers):
        K = self.matrix
        n_dual = self.n - n_primal - n_multipliers
        shift = np.zeros(self.n)
        d = abs(K.diagonal()[:n_primal])
        if n_primal == 0 or not np.all(d > 0):
            return False
        # row-wise shifts relative to a diagonal Schur-complement estimate,
        # so tiny adaptive cells get a proportionally tiny perturbation
        B = K[n_primal:n_primal + n_dual, :n_primal]
        schur = np.asarray(B.multiply(B) @ (1.0 / d)).ravel()
        floor = max(schur.max(initial=0.0), 1.0) * 1e-300
        schur = np.maximum(schur, floor)
        shift[n_primal:n_primal + n_dual] = -DUAL_SHIFT * schur
        if n_multipliers:
            # multipliers only couple to the pressure block
            M = K[n_primal + n_dual:, n_primal:n_primal + n_dual]
            mult = np.asarray(M.multiply(M) @ (1.0 / schur)).ravel()
            shift[n_primal + n_dual:] = DUAL_SHIFT * np.maximum(mult, floor)
        try:
            ldl = qdldl.Solver(sparse.triu(K + sparse.diags(shift), format="csc"),
                               upper=True)
        except RuntimeError:
            return False
        self._ldl = ldl
        self._step = ldl.solve
        # probe: the shifted factors must be a usable preconditioner
        b = K @ np.ones(self.n)
        try:
            self.solve(b)
        except SolverAccuracyError:
            return False
        self.method = "ldlt"
        return True

    def _refined(self, step, b):
        x = step(b)
        res = self.relative_residual(x, b)
        for _ in range(8):
            if res <= REFINE_TARGET:
                break
            x_new = x + step(b - self.matrix @ x)
            res_new = self.relative_residual(x_new, b)
            if not res_new < res:
                break
            stalled = res_new > 0.5 * res
            x, res = x_new, res_new
            if stalled:
                break
        return x, res

    def _krylov(self, b, x0, res0):
        M = spla.LinearOperator(self.matrix.shape, matvec=self._step, dtype=float)
        x, _ = spla.gmres(self.matrix, b, x0=x0, M=M, rtol=0.1 * KRYLOV_TRIGGER,
                          atol=0.0, restart=30, maxiter=10)
        res = self.relative_residual(x, b)
        return (x, res) if res < res0 else (x0, res0)

    def _init_lu(self):
        K = self.matrix
        try:
            self._lu = spla.splu(K, permc_spec="COLAMD")
        except RuntimeError as exc:
            pivot = _dense_zero_pivot(K) if self.n <= _DENSE_PROBE_MAX else -1
            raise SingularSystemError(pivot, str(exc)) from None
        diag = np.abs(self._lu.U.diagonal())
        scale = max(abs(K).max(), 1.0)
        bad = np.flatnonzero(diag <= PIVOT_RTOL * scale)
        if len(bad):
            # U columns follow the column permutation perm_c
            raise SingularSystemError(int(self._lu.perm_c[bad[0]]))
        if self.method != "ldlt":
            self._step = self._lu.solve

    def relative_residual(self, x, b):
        nb = np.linalg.norm(b)
        r = np.linalg.norm(self.matrix @ x - b)
        return r / nb if nb > 0 else r

    def solve(self, rhs, return_residual=False):
        b = np.asarray(rhs, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs length {b.shape[0]} does not match system size {self.n}")
        if not np.any(b):
            x = np.zeros_like(b)
            return (x, 0.0) if return_residual else x
        x, res = self._refined(self._step, b)
        if self.method == "ldlt" and not res <= KRYLOV_TRIGGER:
            x, res = self._krylov(b, x, res)
        if self.method == "ldlt" and not res <= RESIDUAL_TOL:
            if self._lu is None:
                self._init_lu()
            x, res = self._refined(self._lu.solve, b)
        if not np.isfinite(res) or res > RESIDUAL_TOL:
            raise SolverAccuracyError(res)
        return (x, res) if return_residual else x


def factorize(system):
    """Factorize a :class:`BlockSaddleSystem` or any square sparse matrix."""
    if hasattr(system, "matrix"):
        return Factorization(system.matrix, n_primal=len(system.free), n_multipliers=1)
    return Factorization(system)


def solve(fact, rhs):
    return fact.solve(rhs)
