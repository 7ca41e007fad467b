"""Inner-outer recycling: grow a global basis V while solving a sequence of SPD systems.

For each system ``A_i = A_star + diag(mu_i)`` the image ``A_i V`` is refactored
as ``K R`` (blockwise, starting from the eigenvector block).  Every right-hand
side is first tested against Range(K); only when that residual is too large
is a deflated MINRES correction solve run with the small per-RHS space U_j,
and its new direction y_m is appended to both V and U_j.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import BasisError, SolverError
from .krylov import RecycleSpace, initial_guess, minres, recycled_minres, smallest_eigenpairs

__all__ = [
    "TAG_EIGEN",
    "TAG_INITIAL",
    "TAG_CORRECTION",
    "GlobalBasis",
    "PerRhsSpace",
    "BuildLogRow",
    "init_basis",
    "refresh_system_qr",
    "process_system",
    "BaselineRecycler",
    "baseline_per_rhs_recycling",
    "basis_coefficients",
    "save_basis",
    "load_basis",
]

log = logging.getLogger(__name__)

TAG_EIGEN, TAG_INITIAL, TAG_CORRECTION = 0, 1, 2
RANK_TOL = 1e-12


class _ColumnStore:
    """Column-major growable matrix; ``.view`` is the filled part."""

    def __init__(self, data):
        data = np.asarray(data, dtype=float)
        n, r = data.shape
        self._buf = np.empty((n, max(2 * r, 16)), order="F")
        self._buf[:, :r] = data
        self.r = r

    @property
    def view(self):
        return self._buf[:, : self.r]

    def append(self, col):
        if self.r == self._buf.shape[1]:
            grown = np.empty((self._buf.shape[0], 2 * self._buf.shape[1]), order="F")
            grown[:, : self.r] = self.view
            self._buf = grown
        self._buf[:, self.r] = col
        self.r += 1

    def keep(self, cols):
        kept = self.view[:, cols].copy()
        self._buf[:, : kept.shape[1]] = kept
        self.r = kept.shape[1]


def _orthogonalize(Q, X):
    """Two-pass block Gram-Schmidt of X against orthonormal Q; returns (coef, remainder)."""
    coef = Q.T @ X
    rem = X - Q @ coef
    c2 = Q.T @ rem
    rem -= Q @ c2
    return coef + c2, rem


@dataclass
class GlobalBasis:
    """Raw basis V with cached A_star V and, per system, the QR of A_i V."""

    n_eig: int
    _V: _ColumnStore
    _AV: _ColumnStore
    tags: list
    mu: np.ndarray | None = None
    K: np.ndarray | None = None
    R: np.ndarray | None = None
    U0_fact: np.ndarray | None = None

    @classmethod
    def create(cls, schur, columns, tags, n_eig):
        columns = np.asarray(columns, dtype=float)
        return cls(
            n_eig=n_eig,
            _V=_ColumnStore(columns),
            _AV=_ColumnStore(schur.A_star @ columns),
            tags=list(tags),
        )

    @property
    def V(self) -> np.ndarray:
        return self._V.view

    @property
    def A_star_V(self) -> np.ndarray:
        return self._AV.view

    @property
    def r(self) -> int:
        return self._V.r

    @property
    def n(self) -> int:
        return self.V.shape[0]

    def image(self, cols=slice(None)):
        """Columns of A_i V for the current system."""
        V = self.V[:, cols]
        return self.A_star_V[:, cols] + (self.mu[:, None] * V if V.ndim == 2 else self.mu * V)

    def coefficients(self, c):
        """V R^{-1} c without forming R^{-1}."""
        return self.V @ solve_triangular(self.R, c)

    def drop(self, cols):
        keep = np.setdiff1d(np.arange(self.r), np.asarray(cols, dtype=int))
        self._V.keep(keep)
        self._AV.keep(keep)
        self.tags = [self.tags[c] for c in keep]
        self.n_eig = int(sum(1 for c in keep if c < self.n_eig))
        return keep

    def append(self, y, A_star_y=None) -> bool:
        """Rank-one extension of the current QR by column y."""
        if A_star_y is None:
            raise ValueError("A_star_y required")
        z = A_star_y + self.mu * y
        scale = np.linalg.norm(z)
        coef = np.zeros(self.K.shape[1])
        q = z.copy()
        for _ in range(2):
            c = self.K.T @ q
            q -= self.K @ c
            coef += c
        rho = np.linalg.norm(q)
        if scale == 0.0 or rho <= RANK_TOL * scale:
            log.warning("dropping correction: image already in Range(K) (rho/|z| = %.2e)",
                        rho / scale if scale else 0.0)
            return False
        r = self.r
        R = np.zeros((r + 1, r + 1))
        R[:r, :r] = self.R
        R[:r, r] = coef
        R[r, r] = rho
        self.R = R
        self.K = np.column_stack([self.K, q / rho])
        self._V.append(y)
        self._AV.append(A_star_y)
        self.tags.append(TAG_CORRECTION)
        return True


@dataclass
class PerRhsSpace:
    """Column indices into V forming each right-hand side's recycle space U_j."""

    columns: list

    def __len__(self):
        return len(self.columns)

    def remap(self, keep):
        new_index = {int(old): new for new, old in enumerate(keep)}
        self.columns = [[new_index[c] for c in cols if c in new_index] for cols in self.columns]


@dataclass
class BuildLogRow:
    system: int
    rhs: int
    init_relres: float
    iterations: int
    appended: bool
    final_relres: float

    HEADER = "system,rhs,init_relres,iterations,appended,final_relres"

    def csv(self) -> str:
        return (f"{self.system},{self.rhs},{self.init_relres:.5e},{self.iterations},"
                f"{int(self.appended)},{self.final_relres:.5e}")


def init_basis(schur, mu0, B_concat, k_eig=10, tol=1e-7, maxit=None, U0=None, X0=None):
    """Seed V = [U_0, X_0] from the smallest eigenvectors and initial solutions.

    Precomputed ``U0``/``X0`` (e.g. loaded from disk) skip the corresponding work.
    Returns ``(GlobalBasis, PerRhsSpace, X0)``.
    """
    B_concat = np.asarray(B_concat, dtype=float)
    n, n_rhs = B_concat.shape
    if U0 is None:
        if k_eig > 0:
            _, U0 = smallest_eigenpairs(schur.matrix(mu0), k_eig)
        else:
            U0 = np.zeros((n, 0))
    k_eig = U0.shape[1]
    if X0 is None:
        X0 = np.empty((n, n_rhs))
        op = schur.operator(mu0)
        for j in range(n_rhs):
            X0[:, j], rep = minres(op, B_concat[:, j], tol=tol, maxit=maxit)
            if not rep.converged:
                raise SolverError(f"initial solve for rhs {j + 1} failed: {rep.reason}", rep)
    V = np.hstack([U0, X0])
    tags = [TAG_EIGEN] * k_eig + [TAG_INITIAL] * n_rhs
    gb = GlobalBasis.create(schur, V, tags, k_eig)
    per_rhs = PerRhsSpace([list(range(k_eig)) + [k_eig + j] for j in range(n_rhs)])
    return gb, per_rhs, X0


def refresh_system_qr(gb: GlobalBasis, mu, per_rhs: PerRhsSpace | None = None):
    """QR of A_i V computed blockwise: eigenvector block first, then the remainder.

    Only diagonal updates are needed since A_star V is cached.  Columns whose
    projected image is numerically zero are dropped from V (and from the
    per-RHS spaces, when given).
    """
    gb.mu = np.asarray(mu, dtype=float)
    while True:
        Kt = gb.image()
        ke = gb.n_eig
        Q1, R1 = np.linalg.qr(Kt[:, :ke])
        coef, rem = _orthogonalize(Q1, Kt[:, ke:])
        Q2, R2 = np.linalg.qr(rem)
        norms = np.linalg.norm(Kt, axis=0)
        diag = np.abs(np.concatenate([np.diag(R1), np.diag(R2)]))
        bad = np.flatnonzero(diag <= RANK_TOL * np.maximum(norms, np.finfo(float).tiny))
        if bad.size == 0:
            break
        log.warning("dropping %d numerically dependent basis columns", bad.size)
        keep = gb.drop(bad[:1])
        if per_rhs is not None:
            per_rhs.remap(keep)
    r = gb.r
    R = np.zeros((r, r))
    R[:ke, :ke] = R1
    R[:ke, ke:] = coef
    R[ke:, ke:] = R2
    gb.K = np.hstack([Q1, Q2])
    gb.R = R
    # U_0 R1^{-1} shared by every per-RHS recycle space of this system
    gb.U0_fact = solve_triangular(R1.T, gb.V[:, :ke].T, lower=True).T if ke else np.zeros((gb.n, 0))
    return gb


def _rhs_space(gb: GlobalBasis, cols) -> RecycleSpace:
    ke = gb.n_eig
    rs = RecycleSpace(gb.U0_fact.copy(), gb.K[:, :ke].copy())
    for c in cols:
        if c >= ke:
            rs.append(gb.V[:, c], gb.image(c))
    return rs


def process_system(gb: GlobalBasis, per_rhs: PerRhsSpace, schur, B_concat, tol=1e-7,
                   system=1, maxit=None):
    """Solve A_i X = B for every column, growing V only by non-redundant directions.

    Requires :func:`refresh_system_qr` for this system.  Returns ``(X, rows)``.
    """
    B_concat = np.asarray(B_concat, dtype=float)
    n, n_rhs = B_concat.shape
    mu = gb.mu
    A_apply = schur.operator(mu)
    X = np.empty((n, n_rhs))
    rows = []
    for j in range(n_rhs):
        b = B_concat[:, j]
        bnorm = np.linalg.norm(b)
        c = gb.K.T @ b
        r = b - gb.K @ c
        rel = np.linalg.norm(r) / bnorm
        x0 = gb.coefficients(c)
        if rel <= tol:
            X[:, j] = x0
            rows.append(BuildLogRow(system, j + 1, rel, 0, False, rel))
            continue
        rs = _rhs_space(gb, per_rhs.columns[j])
        g, y_m, rep = recycled_minres(A_apply, rs, r, tol=tol, maxit=maxit, ref_norm=bnorm)
        if not rep.converged:
            raise SolverError(
                f"system {system}, rhs {j + 1}: correction solve failed ({rep.reason})", rep)
        X[:, j] = x0 + g
        appended = gb.append(y_m, schur.A_star @ y_m)
        if appended:
            per_rhs.columns[j].append(gb.r - 1)
        rows.append(BuildLogRow(system, j + 1, rel, rep.iterations, appended,
                                rep.true_rel_residual))
    return X, rows


class BaselineRecycler:
    """Per-RHS recycling without a shared global basis.

    Each right-hand side keeps its own raw space, seeded with [U_0, X_0(:, j)];
    every system is solved directly (not as a correction equation) over
    Range([U_j, V_m]) and the new Krylov direction is appended to U_j only.
    """

    def __init__(self, schur, U0, X0):
        self.schur = schur
        self.U0 = np.asarray(U0, dtype=float)
        self.U0_image = schur.A_star @ self.U0
        self.spaces = [[X0[:, j].copy()] for j in range(X0.shape[1])]
        self.images = [[schur.A_star @ X0[:, j]] for j in range(X0.shape[1])]

    def solve_system(self, mu, B_concat, tol=1e-7, system=1, maxit=None):
        mu = np.asarray(mu, dtype=float)
        A_apply = self.schur.operator(mu)
        n, n_rhs = B_concat.shape
        X = np.empty((n, n_rhs))
        rows = []
        for j in range(n_rhs):
            b = B_concat[:, j]
            bnorm = np.linalg.norm(b)
            rs = RecycleSpace.from_columns(self.U0, self.U0_image + mu[:, None] * self.U0)
            for w, aw in zip(self.spaces[j], self.images[j]):
                rs.append(w, aw + mu * w)
            z, r = initial_guess(rs, b)
            rel = np.linalg.norm(r) / bnorm
            if rel <= tol:
                X[:, j] = z
                rows.append(BuildLogRow(system, j + 1, rel, 0, False, rel))
                continue
            g, y_m, rep = recycled_minres(A_apply, rs, r, tol=tol, maxit=maxit, ref_norm=bnorm)
            if not rep.converged:
                raise SolverError(
                    f"baseline system {system}, rhs {j + 1}: solve failed ({rep.reason})", rep)
            X[:, j] = z + g
            self.spaces[j].append(y_m)
            self.images[j].append(self.schur.A_star @ y_m)
            rows.append(BuildLogRow(system, j + 1, rel, rep.iterations, True,
                                    rep.true_rel_residual))
        return X, rows


def baseline_per_rhs_recycling(recycler: BaselineRecycler, mu, B_concat, tol=1e-7, system=1):
    return recycler.solve_system(mu, B_concat, tol=tol, system=system)


def basis_coefficients(V, X_test) -> np.ndarray:
    """Least-squares coefficients c minimizing ||V c - x|| for each column x."""
    V = np.asarray(V, dtype=float)
    X_test = np.asarray(X_test, dtype=float)
    if X_test.shape[0] != V.shape[0]:
        raise ValueError(f"test vectors have length {X_test.shape[0]}, basis has {V.shape[0]}")
    coef, *_ = np.linalg.lstsq(V, X_test, rcond=None)
    return coef


MAGIC = b"ROMB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def save_basis(path, V, tags):
    V = np.asarray(V, dtype="<f8")
    n, r = V.shape
    tags = np.asarray(tags, dtype=np.uint8)
    if tags.shape != (r,):
        raise ValueError("need one provenance tag per column")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, r))
        fh.write(V.tobytes(order="F"))
        fh.write(tags.tobytes())


def load_basis(path):
    """Read a ROMB file; returns ``(V, tags)``."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, n, r = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a ROMB file")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        payload = fh.read(8 * n * r)
        tags = fh.read(r)
    if len(payload) != 8 * n * r or len(tags) != r:
        raise ValueError(f"{path}: truncated payload")
    V = np.frombuffer(payload, dtype="<f8").reshape((n, r), order="F").astype(float)
    return V, np.frombuffer(tags, dtype=np.uint8).copy()
