"""Full-order and reduced-order transfer functions with their parameter Jacobians.

Both paths share one formula: with forward solutions X_B (columns for the
effective sources) and adjoint solutions X_C (effective detectors),

    Psi        = C~^T X_B                        (n_det x n_src)
    dPsi/dp_k  = -X_C^T diag(delta_k) X_B

where ``delta_k`` is the sparse derivative of the Schur operator's diagonal.
Jacobian columns are ``vec`` of these matrices (detectors fastest).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import BasisError, SolverError
from .krylov import minres

__all__ = [
    "ReducedModel",
    "reduce",
    "rom_solutions",
    "rom_transfer",
    "rom_jacobian",
    "fom_solutions",
    "fom_transfer",
    "fom_jacobian",
    "jacobian_from_solutions",
    "vec",
]


def vec(M) -> np.ndarray:
    """Stack columns left to right."""
    return np.asarray(M).ravel(order="F")


def jacobian_from_solutions(XB, XC, derivs) -> np.ndarray:
    """Columns vec(-X_C^T diag(d_k) X_B) from sparse diagonal derivatives.

    ``derivs`` is a sequence of ``(support, values)`` pairs already in the
    Schur operator's scaling.
    """
    n_src, n_det = XB.shape[1], XC.shape[1]
    J = np.zeros((n_src * n_det, len(derivs)))
    for k, (s, d) in enumerate(derivs):
        if len(s) == 0:
            continue
        J[:, k] = -vec(XC[s].T @ (d[:, None] * XB[s]))
    return J


@dataclass(frozen=True)
class ReducedModel:
    V: np.ndarray
    E_r: np.ndarray
    A_star_r: np.ndarray
    B_r: np.ndarray
    C_r: np.ndarray

    @property
    def r(self) -> int:
        return self.V.shape[1]

    def operator(self, mu) -> np.ndarray:
        """A_r(p) = A_star_r + V^T diag(mu) V."""
        M = (self.V * mu[:, None]).T @ self.V
        M = 0.5 * (M + M.T)
        return self.A_star_r + M


def reduce(V, schur, B_tilde, C_tilde, A_star_V=None) -> ReducedModel:
    V = np.ascontiguousarray(V, dtype=float)
    E_r = V.T @ V
    try:
        sla.cholesky(E_r)
    except np.linalg.LinAlgError as exc:
        raise BasisError("basis is numerically rank deficient (V^T V not SPD)") from exc
    AV = schur.A_star @ V if A_star_V is None else A_star_V
    A_star_r = V.T @ AV
    A_star_r = 0.5 * (A_star_r + A_star_r.T)
    return ReducedModel(V, E_r, A_star_r, V.T @ B_tilde, V.T @ C_tilde)


def _reduced_solve(A_r, rhs):
    # symmetric Jacobi scaling before Cholesky; raw V columns differ wildly in norm
    d = np.diag(A_r)
    if np.any(d <= 0):
        raise BasisError("reduced operator has a nonpositive diagonal")
    s = 1.0 / np.sqrt(d)
    try:
        fac = sla.cho_factor(s[:, None] * A_r * s[None, :])
    except np.linalg.LinAlgError as exc:
        raise BasisError("reduced operator is not positive definite") from exc
    return s[:, None] * sla.cho_solve(fac, s[:, None] * rhs)


def rom_solutions(rm: ReducedModel, mu):
    """Reduced coordinates (Y_B, Y_C) of the forward and adjoint solutions."""
    A_r = rm.operator(np.asarray(mu, dtype=float))
    n_src = rm.B_r.shape[1]
    Y = _reduced_solve(A_r, np.hstack([rm.B_r, rm.C_r]))
    return Y[:, :n_src], Y[:, n_src:]


def rom_transfer(rm: ReducedModel, mu) -> np.ndarray:
    YB, _ = rom_solutions(rm, mu)
    return rm.C_r.T @ YB


def rom_jacobian(rm: ReducedModel, mu, derivs, solutions=None) -> np.ndarray:
    """Reduced Jacobian; only rows of V on each derivative's support enter."""
    YB, YC = rom_solutions(rm, mu) if solutions is None else solutions
    n_src, n_det = YB.shape[1], YC.shape[1]
    J = np.zeros((n_src * n_det, len(derivs)))
    for k, (s, d) in enumerate(derivs):
        if len(s) == 0:
            continue
        Vs = rm.V[s]
        Mk = Vs.T @ (d[:, None] * Vs)
        J[:, k] = -vec(YC.T @ Mk @ YB)
    return J


def fom_solutions(schur, rhs, mu, method="direct", tol=1e-10, maxit=None):
    """Solve A(p) X = rhs column by column.  Returns ``(X, n_solves)``."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim == 1:
        rhs = rhs[:, None]
    if method == "direct":
        lu = spla.splu(schur.matrix(mu))
        return lu.solve(rhs), rhs.shape[1]
    if method != "minres":
        raise ValueError(f"unknown solve method {method!r}")
    op = schur.operator(mu)
    X = np.empty_like(rhs)
    for j in range(rhs.shape[1]):
        X[:, j], rep = minres(op, rhs[:, j], tol=tol, maxit=maxit)
        if not rep.converged:
            raise SolverError(f"full-order solve for column {j + 1} failed: {rep.reason}", rep)
    return X, rhs.shape[1]


def fom_transfer(schur, layout, mu, method="direct", tol=1e-10) -> np.ndarray:
    XB, _ = fom_solutions(schur, layout.B_tilde, mu, method=method, tol=tol)
    return layout.C_tilde.T @ XB


def fom_jacobian(schur, layout, mu, derivs, method="direct", tol=1e-10) -> np.ndarray:
    X, _ = fom_solutions(schur, layout.B_concat, mu, method=method, tol=tol)
    n_src = layout.n_src
    return jacobian_from_solutions(X[:, :n_src], X[:, n_src:], derivs)
