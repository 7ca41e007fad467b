"""Independent reference computations used by the tests.

Everything here is dense and deliberately naive: full block solves, explicit
Krylov bases with least squares, central differences, truncated SVD.
"""
import numpy as np
import scipy.linalg as sla

from romdot.discretization import full_block_matrix
from romdot.rom import reduce


def full_transfer(blocks, layout, mu):
    """C^T A^-1 B on the unreduced block system (boundary unknowns first)."""
    A = full_block_matrix(blocks, mu)
    nb = blocks.grid.n_boundary
    n = A.shape[0]
    B = np.zeros((n, layout.n_src))
    B[:nb] = layout.B1.toarray()
    C = np.zeros((n, layout.n_det))
    C[:nb] = layout.C1.toarray()
    return C.T @ np.linalg.solve(A, B)


def schur_transfer_dense(schur, layout, mu):
    A = schur.matrix(mu).toarray()
    return layout.C_tilde.T @ np.linalg.solve(A, layout.B_tilde)


def krylov_basis(apply_op, v, k):
    """Orthonormal basis of span{v, Av, ..., A^(k-1) v} by full Arnoldi."""
    Q = np.zeros((v.size, 0))
    w = v.copy()
    for _ in range(k):
        for _ in range(2):
            w = w - Q @ (Q.T @ w)
        nrm = np.linalg.norm(w)
        if nrm <= 1e-14 * np.linalg.norm(v):
            break
        Q = np.column_stack([Q, w / nrm])
        w = apply_op(Q[:, -1])
    return Q


def minres_oracle(A, b, k):
    """argmin ||b - A x|| over the k-th Krylov space, by least squares."""
    Q = krylov_basis(lambda x: A @ x, b, k)
    y, *_ = np.linalg.lstsq(A @ Q, b, rcond=None)
    return Q @ y


def augmented_oracle(A, U, K, r, k):
    """argmin ||r - A g|| over Range([U, V_k]), V_k Krylov of (I-KK^T)A from (I-KK^T)r."""
    P = np.eye(A.shape[0]) - K @ K.T
    Vk = krylov_basis(lambda x: P @ (A @ x), P @ r, k)
    W = np.column_stack([U, Vk])
    y, *_ = np.linalg.lstsq(A @ W, r, rcond=None)
    return W @ y


def central_difference(fun, p, k, step):
    e = np.zeros_like(p)
    e[k] = step
    return (fun(p + e) - fun(p - e)) / (2.0 * step)


def truncated_svd_rom(schur, layout, snapshots, rel_tol=1e-12):
    """Reduced model from the leading left singular vectors of stacked snapshots."""
    S = np.hstack(snapshots)
    Uf, s, _ = sla.svd(S, full_matrices=False)
    r = int(np.sum(s > rel_tol * s[0]))
    return reduce(Uf[:, :r], schur, layout.B_tilde, layout.C_tilde)
