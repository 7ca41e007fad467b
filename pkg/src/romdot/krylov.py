"""Symmetric Krylov kernels: MINRES, recycled MINRES and a smallest-eigenpair solver."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError

__all__ = [
    "RecycleSpace",
    "SolveReport",
    "initial_guess",
    "minres",
    "recycled_minres",
    "smallest_eigenpairs",
]

log = logging.getLogger(__name__)

STAGNATION_WINDOW = 50
DROP_TOL = 1e-12


@dataclass
class SolveReport:
    iterations: int = 0
    rel_residual_history: list = field(default_factory=list)
    converged: bool = False
    correction_norm: float = 0.0
    true_rel_residual: float = float("nan")
    reason: str = ""


class RecycleSpace:
    """A pair (U, K) with A U = K and orthonormal K.

    Columns are added one at a time by :meth:`append`, which orthogonalizes
    the new image against K (two Gram-Schmidt passes) and applies the same
    combination to the preimage.
    """

    def __init__(self, U, K):
        U = np.asarray(U, dtype=float)
        K = np.asarray(K, dtype=float)
        if U.shape != K.shape:
            raise ValueError(f"U {U.shape} and K {K.shape} differ in shape")
        self.U = U
        self.K = K

    @classmethod
    def empty(cls, n: int) -> "RecycleSpace":
        return cls(np.zeros((n, 0)), np.zeros((n, 0)))

    @classmethod
    def from_columns(cls, W, AW) -> "RecycleSpace":
        """Build from raw columns W and their images AW via thin QR."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        rs = cls.empty(W.shape[0])
        for c in range(W.shape[1]):
            rs.append(W[:, c], AW[:, c])
        return rs

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def n_c(self) -> int:
        return self.K.shape[1]

    def project(self, v):
        """Apply I - K K^T."""
        if self.n_c == 0:
            return v
        return v - self.K @ (self.K.T @ v)

    def append(self, u, Au) -> bool:
        """Add column u with known image Au; returns False if Au is already in Range(K)."""
        u = np.asarray(u, dtype=float)
        w = np.array(Au, dtype=float)
        scale = np.linalg.norm(w)
        if scale == 0.0:
            return False
        coef = np.zeros(self.n_c)
        for _ in range(2):
            c = self.K.T @ w
            w -= self.K @ c
            coef += c
        rho = np.linalg.norm(w)
        if rho <= DROP_TOL * scale:
            return False
        self.K = np.column_stack([self.K, w / rho])
        self.U = np.column_stack([self.U, (u - self.U @ coef) / rho])
        return True


def initial_guess(rs: RecycleSpace, b):
    """Residual-minimizing guess over Range(U): z = U K^T b, r = b - K K^T b."""
    c = rs.K.T @ b
    return rs.U @ c, b - rs.K @ c


def minres(apply_op, b, tol=1e-8, maxit=None, ref_norm=None, ortho=None):
    """Unpreconditioned MINRES (Paige-Saunders short recurrences) from x0 = 0.

    Stops once ``||b - A x|| <= tol * ref_norm`` (``ref_norm`` defaults to
    ``||b||``).  The recurrence estimate triggers an explicit residual check,
    so a reported convergence is always certified by a true residual.
    ``ortho``, if given, is applied to each new Lanczos vector.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if maxit is None:
        maxit = 2 * n
    beta1 = float(np.linalg.norm(b))
    ref = beta1 if ref_norm is None else float(ref_norm)
    x = np.zeros(n)
    report = SolveReport(rel_residual_history=[beta1 / ref if ref > 0 else 0.0])
    if beta1 == 0.0 or beta1 <= tol * ref:
        report.converged = True
        report.true_rel_residual = beta1 / ref if ref > 0 else 0.0
        report.reason = "initial residual below tolerance"
        return x, report

    r1 = b.copy()
    r2 = b.copy()
    beta = beta1
    oldb = 0.0
    dbar = 0.0
    epsln = 0.0
    phibar = beta1
    cs, sn = -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    tiny = np.finfo(float).eps
    hist = report.rel_residual_history

    itn = 0
    while itn < maxit:
        itn += 1
        v = r2 / beta
        y = apply_op(v)
        if itn >= 2:
            y = y - (beta / oldb) * r1
        alfa = float(v @ y)
        y = y - (alfa / beta) * r2
        if ortho is not None:
            y = ortho(y)
        r1 = r2
        r2 = y
        oldb = beta
        beta = float(np.linalg.norm(r2))

        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(np.hypot(gbar, beta), tiny)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w

        if not np.isfinite(phibar) or not np.all(np.isfinite(x[:1])):
            raise SolverError("MINRES breakdown (non-finite recurrence)", report)
        hist.append(phibar / ref)

        if phibar <= tol * ref or beta <= tiny * beta1:
            true = float(np.linalg.norm(b - apply_op(x)))
            report.true_rel_residual = true / ref
            if true <= tol * ref:
                report.converged = True
                report.reason = "tolerance reached"
                break
            if beta <= tiny * beta1:
                report.reason = "Lanczos breakdown before tolerance"
                break
        if itn > STAGNATION_WINDOW and hist[-1] >= hist[-1 - STAGNATION_WINDOW] * (1.0 - 1e-12):
            report.reason = "stagnation"
            break
    else:
        report.reason = "iteration limit"

    if not np.all(np.isfinite(x)):
        raise SolverError("MINRES produced non-finite iterate", report)
    report.iterations = itn
    report.correction_norm = float(np.linalg.norm(x))
    if not report.converged and np.isnan(report.true_rel_residual):
        report.true_rel_residual = float(np.linalg.norm(b - apply_op(x))) / ref
    return x, report


def recycled_minres(A_apply, rs: RecycleSpace, rhs, tol=1e-8, maxit=None, ref_norm=None):
    """Deflated MINRES on (I - K K^T) A over the augmented space Range([U, V_m]).

    Returns ``(g, y_m, report)``: ``y_m`` is the new-direction component
    produced by the short recurrence and ``g = y_m - U K^T (A y_m)`` minimizes
    ``||rhs - A g||`` over the augmented space.  The stopping test is on
    ``||rhs - A g|| <= tol * ref_norm``; ``ref_norm`` defaults to the norm of
    ``rhs`` before projection, so a right-hand side already in Range(K) exits
    at once instead of iterating on rounding noise.
    """
    rhs = np.asarray(rhs, dtype=float)
    if ref_norm is None:
        ref_norm = float(np.linalg.norm(rhs))
    rhs = rs.project(rhs)
    n = rhs.shape[0]
    if not np.any(rhs):
        rep = SolveReport(converged=True, true_rel_residual=0.0, reason="zero right-hand side")
        return np.zeros(n), np.zeros(n), rep

    def op(v):
        return rs.project(A_apply(v))

    y_m, report = minres(op, rhs, tol=tol, maxit=maxit, ref_norm=ref_norm, ortho=rs.project)
    z = -(rs.K.T @ A_apply(y_m))
    g = y_m + rs.U @ z
    report.correction_norm = float(np.linalg.norm(g))
    return g, y_m, report


def _norm1_bound(A):
    if sp.issparse(A):
        return float(abs(A).sum(axis=0).max())
    return float(np.abs(A).sum(axis=0).max())


def smallest_eigenpairs(A, k, tol=1e-8, dense_limit=400):
    """The k smallest eigenpairs of a symmetric positive definite matrix.

    Sparse matrices use shift-invert Lanczos (ARPACK) around zero with one
    sparse LU of A; small or nearly full requests go to a dense eigensolver.
    Returns ``(eigenvalues, U)`` in ascending order, U with orthonormal columns.
    """
    n = A.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if isinstance(A, spla.LinearOperator) or callable(A) and not hasattr(A, "shape"):
        raise TypeError("smallest_eigenpairs needs an explicit matrix")

    if n <= dense_limit or k >= n - 1:
        M = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        vals, vecs = sla.eigh(M, subset_by_index=[0, k - 1])
    else:
        lu = spla.splu(sp.csc_matrix(A))
        opinv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
        vals, vecs = spla.eigsh(
            A, k=k, sigma=0.0, which="LM", OPinv=opinv, tol=0.0, maxiter=50 * n
        )
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        vecs, _ = np.linalg.qr(vecs)
        vals = np.einsum("ij,ij->j", vecs, A @ vecs)

    lam_max = _norm1_bound(A)
    res = np.linalg.norm(A @ vecs - vecs * vals, axis=0)
    if np.any(res > tol * lam_max):
        raise SolverError(f"eigenpairs not converged: max residual {res.max():.3e}")
    return vals, vecs
