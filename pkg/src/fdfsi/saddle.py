"""Block saddle-point operator, restarted GMRES and block preconditioners.

The unknown vector is ordered ``[u, p, X, lambda]``.  The operator splits
into a fluid block ``A11`` (``u, p``), a solid block ``A22`` (``X, lambda``)
and the coupling blocks ``A12`` and ``A21``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

BLOCK_DIAG, BLOCK_TRI = "diag", "tri"
PRECONDITIONERS = (BLOCK_DIAG, BLOCK_TRI)


class SolverError(RuntimeError):
    pass


class SingularBlockError(SolverError):
    pass


class GMRESError(SolverError):
    """GMRES hit its iteration cap; carries the best iterate."""

    def __init__(self, message, x, residual, its):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.its = its


class NewtonError(SolverError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class BlockSystem:
    """The 2x2 block operator and its right-hand side.

    ``rhs1`` pairs with the fluid rows ``(u, p)`` and ``rhs2`` with the
    solid rows ``(X, lambda)``.
    """

    A11: sp.csr_matrix
    A12: sp.csr_matrix
    A21: sp.csr_matrix
    A22: sp.csr_matrix
    rhs1: np.ndarray
    rhs2: np.ndarray
    _mono: sp.csr_matrix = field(default=None, repr=False)

    def __post_init__(self):
        n1, n2 = self.A11.shape[0], self.A22.shape[0]
        shapes = {
            "A11": (self.A11.shape, (n1, n1)),
            "A12": (self.A12.shape, (n1, n2)),
            "A21": (self.A21.shape, (n2, n1)),
            "A22": (self.A22.shape, (n2, n2)),
            "rhs1": (np.shape(self.rhs1), (n1,)),
            "rhs2": (np.shape(self.rhs2), (n2,)),
        }
        for name, (got, want) in shapes.items():
            if tuple(got) != want:
                raise ValueError(f"block {name} has shape {got}, expected {want}")

    @property
    def n1(self) -> int:
        return self.A11.shape[0]

    @property
    def n2(self) -> int:
        return self.A22.shape[0]

    @property
    def shape(self):
        n = self.n1 + self.n2
        return (n, n)

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([self.rhs1, self.rhs2])

    def block_matvec(self, x) -> np.ndarray:
        x1, x2 = x[: self.n1], x[self.n1:]
        return np.concatenate([self.A11 @ x1 + self.A12 @ x2, self.A21 @ x1 + self.A22 @ x2])

    def monolithic(self) -> sp.csr_matrix:
        if self._mono is None:
            self._mono = sp.bmat([[self.A11, self.A12], [self.A21, self.A22]], format="csr")
        return self._mono

    def matvec(self, x) -> np.ndarray:
        return self.monolithic() @ x


def coupling_blocks(Cf, n_u: int, n_p: int, n_x: int):
    """``A12 = [[0, Cf^T], [0, 0]]`` and ``A21 = [[0, 0], [Cf, 0]]``."""
    Cf = sp.csr_matrix(Cf)
    A12 = sp.bmat([[sp.csr_matrix((n_u, n_x)), Cf.T], [sp.csr_matrix((n_p, n_x)), None]], format="csr")
    A21 = sp.bmat([[sp.csr_matrix((n_x, n_u)), sp.csr_matrix((n_x, n_p))], [Cf, None]], format="csr")
    return A12, A21


def solid_block(As, Cs, dt: float) -> sp.csr_matrix:
    """``A22 = [[A_s, -C_s^T], [-(1/dt) C_s, 0]]``."""
    n = Cs.shape[0]
    return sp.bmat([[As, -Cs.T], [-(1.0 / dt) * Cs, sp.csr_matrix((n, n))]], format="csr")


def build_block_system(A11, Cf, As, Cs, dt: float, g1, g2, n_p: int, solid_force=None) -> BlockSystem:
    """Assemble the full 4-field operator from its pieces.

    ``A11`` is the constrained, pressure-pinned fluid operator; ``g1`` the
    velocity right-hand side, ``g2`` the multiplier right-hand side and
    ``solid_force`` an optional load on the position rows.
    """
    n1 = A11.shape[0]
    n_u = n1 - n_p
    n_x = Cs.shape[0]
    if Cf.shape != (n_x, n_u):
        raise ValueError(f"coupling matrix has shape {Cf.shape}, expected {(n_x, n_u)}")
    if As.shape != (n_x, n_x):
        raise ValueError(f"solid stiffness has shape {As.shape}, expected {(n_x, n_x)}")
    A12, A21 = coupling_blocks(Cf, n_u, n_p, n_x)
    A22 = solid_block(As, Cs, dt)
    rhs1 = np.concatenate([np.asarray(g1, dtype=float), np.zeros(n_p)])
    f = np.zeros(n_x) if solid_force is None else np.asarray(solid_force, dtype=float)
    rhs2 = np.concatenate([f, np.asarray(g2, dtype=float)])
    return BlockSystem(A11, A12, A21, A22, rhs1, rhs2)


class DirectFactor:
    """Sparse LU factorisation (SuperLU with partial pivoting) of one block."""

    def __init__(self, matrix, name: str = "block"):
        self.name = name
        self.shape = matrix.shape
        if matrix.shape[0] != matrix.shape[1]:
            raise SingularBlockError(f"{name}: matrix is not square {matrix.shape}")
        try:
            self.lu = spla.splu(sp.csc_matrix(matrix))
        except RuntimeError as exc:
            raise SingularBlockError(f"{name}: factorisation failed ({exc})") from exc
        if not np.all(np.isfinite(self.lu.U.diagonal())):
            raise SingularBlockError(f"{name}: non-finite pivots")

    def solve(self, b) -> np.ndarray:
        return self.lu.solve(np.asarray(b, dtype=float))

    def checksum(self) -> str:
        h = hashlib.sha1()
        for m in (self.lu.L, self.lu.U):
            h.update(np.ascontiguousarray(m.data).tobytes())
        h.update(self.lu.perm_r.tobytes())
        h.update(self.lu.perm_c.tobytes())
        return h.hexdigest()


def factorize_block(matrix, name: str = "block") -> DirectFactor:
    return DirectFactor(matrix, name)


class BlockPreconditioner:
    """Exact block-diagonal or block-lower-triangular preconditioner."""

    def __init__(self, kind: str, F11: DirectFactor, F22: DirectFactor, A21=None):
        if kind not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {kind!r}; expected one of {PRECONDITIONERS}")
        if kind == BLOCK_TRI and A21 is None:
            raise ValueError("block-triangular preconditioner needs A21")
        self.kind = kind
        self.F11, self.F22, self.A21 = F11, F22, A21
        self.n1 = F11.shape[0]

    def apply(self, r) -> np.ndarray:
        r1, r2 = r[: self.n1], r[self.n1:]
        z1 = self.F11.solve(r1)
        if self.kind == BLOCK_TRI:
            r2 = r2 - self.A21 @ z1
        z2 = self.F22.solve(r2)
        return np.concatenate([z1, z2])

    __call__ = apply


def precond_apply(kind, F11, F22, A21, r) -> np.ndarray:
    return BlockPreconditioner(kind, F11, F22, A21).apply(r)


def _as_matvec(A):
    if callable(A) and not hasattr(A, "shape"):
        return A
    if hasattr(A, "matvec") and not sp.issparse(A):
        return A.matvec
    return lambda v: A @ v


def gmres(A, b, M=None, tol: float = 1e-8, restart: int = 200, maxit: int = 2000, x0=None):
    """Restarted GMRES with right preconditioning.

    Stops when ``||b - A x|| <= tol * ||b||`` (true, unpreconditioned
    residual).  Returns ``(x, its)`` with ``its`` the total number of inner
    iterations.  Raises :class:`GMRESError` after ``maxit`` iterations.
    """
    if tol <= 0 or restart < 1:
        raise ValueError("tol must be positive and restart at least 1")
    matvec = _as_matvec(A)
    prec = (lambda v: v) if M is None else (M.apply if hasattr(M, "apply") else M)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0
    target = tol * bnorm
    r = b - matvec(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    its = 0
    best_x, best_res = x.copy(), beta
    while beta > target:
        if its >= maxit:
            raise GMRESError(
                f"GMRES did not converge in {maxit} iterations (relative residual {best_res / bnorm:.3e})",
                best_x, best_res / bnorm, its,
            )
        m = min(restart, maxit - its)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_used = 0
        for k in range(m):
            Z[k] = prec(V[k])
            w = matvec(Z[k])
            for i in range(k + 1):
                H[i, k] = np.dot(w, V[i])
                w -= H[i, k] * V[i]
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] > 0.0:
                V[k + 1] = w / H[k + 1, k]
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            den = np.hypot(H[k, k], H[k + 1, k])
            cs[k], sn[k] = H[k, k] / den, H[k + 1, k] / den
            H[k, k] = den
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            its += 1
            k_used = k + 1
            if abs(g[k + 1]) <= target or H[k, k] == 0.0:
                break
        y = np.linalg.solve(np.triu(H[:k_used, :k_used]), g[:k_used]) if k_used else np.zeros(0)
        x = x + y @ Z[:k_used]
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        if beta < best_res:
            best_x, best_res = x.copy(), beta
        log.debug("gmres cycle: its=%d rel.res=%.3e", its, beta / bnorm)
    return x, its


@dataclass
class NewtonResult:
    x: np.ndarray
    nit: int
    its: list
    history: list


def newton_solve(problem, x0, precond: str = BLOCK_TRI, tol: float = 1e-6, maxit: int = 20,
                 gmres_tol: float = 1e-8, restart: int = 200, gmres_maxit: int = 2000,
                 atol: float = 1e-13) -> NewtonResult:
    """Newton's method on the full 4-field residual.

    ``problem`` provides ``residual(x)`` and ``jacobian(x)`` (a
    :class:`BlockSystem` without right-hand side meaning) plus ``F11``, the
    reusable factor of the fluid block.  Converged when the Euclidean
    residual has dropped by ``tol`` relative to the initial guess, or is
    below ``atol`` (a state already solved to roundoff takes no step).
    """
    x = np.array(x0, dtype=float)
    R = problem.residual(x)
    r0 = np.linalg.norm(R)
    history = [r0]
    its = []
    nit = 0
    while history[-1] > max(tol * r0, atol):
        if nit >= maxit:
            raise NewtonError(f"Newton did not converge in {maxit} iterations", history)
        J = problem.jacobian(x)
        F22 = factorize_block(J.A22, "A22")
        P = BlockPreconditioner(precond, problem.F11, F22, J.A21)
        dx, k = gmres(J.matvec, -R, P, tol=gmres_tol, restart=restart, maxit=gmres_maxit)
        x += dx
        its.append(k)
        nit += 1
        R = problem.residual(x)
        history.append(np.linalg.norm(R))
        log.debug("newton it %d: |R| = %.3e (rel %.3e), gmres its %d", nit, history[-1], history[-1] / r0, k)
    return NewtonResult(x, nit, its, history)
