"""Finite-difference blocks for the 2D diffusion slab and its Schur complement.

Unknowns are ordered boundary-first: the bottom Robin row (j = 0) followed by
the top Robin row (j = ny-1), each with i running fastest, and then the
interior rows j = 1..ny-2 lexicographically.  Left and right columns belong to
the interior block; the zero Dirichlet condition sits on ghost nodes one
spacing outside, so the interior block has exactly (ny-2)*nx unknowns.

Interior rows are the h^2-scaled five-point stencil of -div(D0 grad), so an
absorption field enters the interior block as diag(h^2 * mu).  Callers pass
the already-scaled vector to :class:`SchurOperator`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError

__all__ = [
    "GridConfig",
    "Grid",
    "BlockSystem",
    "SchurOperator",
    "SourceDetectorLayout",
    "build_grid",
    "assemble_blocks",
    "schur_operator",
    "effective_layout",
    "default_positions",
    "full_block_matrix",
]

FULL_MATRIX_LIMIT = 2500


@dataclass(frozen=True)
class GridConfig:
    nx: int
    ny: int
    xmin: float = 0.0
    xmax: float = 1.0
    ymin: float = 0.0
    ymax: float = 1.0
    diffusion: float = 1.0
    robin: float = 0.1
    speed: float = 1.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ConfigError("nx and ny must be integers")
        if self.nx < 5 or self.ny < 5:
            raise ConfigError(f"grid needs at least 5x5 nodes, got {self.nx}x{self.ny}")
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ConfigError("empty domain")
        hx = (self.xmax - self.xmin) / (self.nx - 1)
        hy = (self.ymax - self.ymin) / (self.ny - 1)
        if abs(hx - hy) > 1e-12 * hx:
            raise ConfigError(f"cells must be square (hx={hx!r}, hy={hy!r})")
        for name in ("diffusion", "robin", "speed"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def h(self) -> float:
        return (self.xmax - self.xmin) / (self.nx - 1)


@dataclass(frozen=True)
class Grid:
    cfg: GridConfig
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    @property
    def nx(self) -> int:
        return self.cfg.nx

    @property
    def ny(self) -> int:
        return self.cfg.ny

    @property
    def h(self) -> float:
        return self.cfg.h

    @property
    def n_boundary(self) -> int:
        return 2 * self.nx

    @property
    def n_interior(self) -> int:
        return (self.ny - 2) * self.nx

    @property
    def n_unknowns(self) -> int:
        return self.n_boundary + self.n_interior

    def boundary_index(self, i, top: bool):
        return np.asarray(i) + (self.nx if top else 0)

    def interior_index(self, i, j):
        """Interior unknown number of grid node (i, j), 1 <= j <= ny-2."""
        return (np.asarray(j) - 1) * self.nx + np.asarray(i)

    @property
    def ordering(self) -> np.ndarray:
        """Unknown number of every grid node, indexed [j, i]."""
        order = np.empty((self.ny, self.nx), dtype=np.int64)
        order[0] = np.arange(self.nx)
        order[-1] = self.nx + np.arange(self.nx)
        order[1:-1] = self.n_boundary + np.arange(self.n_interior).reshape(self.ny - 2, self.nx)
        return order

    def interior_coords(self) -> np.ndarray:
        """(n_interior, 2) array of interior node coordinates in unknown order."""
        X, Y = np.meshgrid(self.x, self.y[1:-1])
        return np.column_stack([X.ravel(), Y.ravel()])


def build_grid(cfg: GridConfig) -> Grid:
    x = cfg.xmin + cfg.h * np.arange(cfg.nx)
    y = cfg.ymin + cfg.h * np.arange(cfg.ny)
    return Grid(cfg, x, y)


@dataclass(frozen=True)
class BlockSystem:
    grid: Grid
    G: sp.dia_matrix
    D1: sp.csr_matrix
    D2: sp.csr_matrix
    L: sp.csr_matrix

    @property
    def g_diag(self) -> np.ndarray:
        return self.G.diagonal()


def assemble_blocks(grid: Grid) -> BlockSystem:
    nx, ny, h = grid.nx, grid.ny, grid.h
    d0 = grid.cfg.diffusion
    robin = 2.0 * grid.cfg.robin * d0 / h
    nb, ni = grid.n_boundary, grid.n_interior

    G = sp.diags(np.full(nb, 1.0 + robin), format="dia")

    # each Robin node couples to its single vertical interior neighbour
    cols = np.arange(nx)
    bottom_rows = grid.boundary_index(cols, top=False)
    top_rows = grid.boundary_index(cols, top=True)
    bottom_nb = grid.interior_index(cols, 1)
    top_nb = grid.interior_index(cols, ny - 2)
    rows = np.concatenate([bottom_rows, top_rows])
    nbrs = np.concatenate([bottom_nb, top_nb])
    D1 = sp.csr_matrix((np.full(nb, -robin), (rows, nbrs)), shape=(nb, ni))
    D2 = sp.csr_matrix((np.full(nb, -d0), (nbrs, rows)), shape=(ni, nb))

    # h^2-scaled 5-point stencil; ghost Dirichlet columns drop out
    tx = sp.diags([np.full(nx - 1, -d0), np.full(nx, 2.0 * d0), np.full(nx - 1, -d0)], [-1, 0, 1])
    m = ny - 2
    ty = sp.diags([np.full(m - 1, -d0), np.full(m, 2.0 * d0), np.full(m - 1, -d0)], [-1, 0, 1])
    L = (sp.kron(sp.identity(m), tx) + sp.kron(ty, sp.identity(nx))).tocsr()
    return BlockSystem(grid, G, D1, D2, L)


@dataclass(frozen=True)
class SchurOperator:
    """Symmetric operator A_star = L - D2 G^-1 D1 with a diagonal absorption hook."""

    A_star: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.A_star.shape[0]

    def apply(self, mu, x):
        x = np.asarray(x)
        if x.ndim == 1:
            return self.A_star @ x + mu * x
        return self.A_star @ x + mu[:, None] * x

    def matrix(self, mu=None) -> sp.csc_matrix:
        if mu is None:
            return self.A_star.tocsc()
        return (self.A_star + sp.diags(mu)).tocsc()

    def operator(self, mu):
        return lambda x: self.apply(mu, x)


def schur_operator(blocks: BlockSystem) -> SchurOperator:
    g = blocks.g_diag
    if np.any(g == 0):
        raise ConfigError("G is singular")
    A_star = blocks.L - blocks.D2 @ sp.diags(1.0 / g) @ blocks.D1
    A_star = A_star.tocsr()
    A_star.sum_duplicates()
    A_star.eliminate_zeros()
    return SchurOperator(A_star)


@dataclass(frozen=True)
class SourceDetectorLayout:
    src_nodes: np.ndarray
    det_nodes: np.ndarray
    B1: sp.csc_matrix
    C1: sp.csc_matrix
    B_tilde: np.ndarray
    C_tilde: np.ndarray

    @property
    def n_src(self) -> int:
        return len(self.src_nodes)

    @property
    def n_det(self) -> int:
        return len(self.det_nodes)

    @property
    def n_rhs(self) -> int:
        return self.n_src + self.n_det

    @property
    def B_concat(self) -> np.ndarray:
        return np.hstack([self.B_tilde, self.C_tilde])


def default_positions(nx: int, count: int) -> np.ndarray:
    """Evenly spaced column indices along a boundary row, corners excluded."""
    if count < 1 or count > nx - 2:
        raise ConfigError(f"cannot place {count} probes on a row of {nx} nodes")
    pos = np.rint(np.linspace(0, nx - 1, count + 2)[1:-1]).astype(np.int64)
    if len(np.unique(pos)) != count:
        raise ConfigError("probe positions collide")
    return pos


def effective_layout(blocks: BlockSystem, src_nodes, det_nodes) -> SourceDetectorLayout:
    """Push boundary sources/detectors through the elimination.

    ``src_nodes`` and ``det_nodes`` are boundary unknown numbers; sources must
    lie on the top row and detectors on the bottom row.
    """
    grid = blocks.grid
    src = np.asarray(src_nodes, dtype=np.int64)
    det = np.asarray(det_nodes, dtype=np.int64)
    nx, nb = grid.nx, grid.n_boundary
    if np.intersect1d(src, det).size:
        raise ConfigError("sources and detectors must not share nodes")
    if np.any((src < nx) | (src >= nb)):
        raise ConfigError("sources must sit on the top boundary row")
    if np.any((det < 0) | (det >= nx)):
        raise ConfigError("detectors must sit on the bottom boundary row")

    def unit_columns(nodes):
        return sp.csc_matrix(
            (np.ones(len(nodes)), (nodes, np.arange(len(nodes)))), shape=(nb, len(nodes))
        )

    B1, C1 = unit_columns(src), unit_columns(det)
    ginv = sp.diags(1.0 / blocks.g_diag)
    B_tilde = (blocks.D2 @ ginv @ B1).toarray()
    C_tilde = (blocks.D1.T @ ginv @ C1).toarray()
    return SourceDetectorLayout(src, det, B1, C1, B_tilde, C_tilde)


def full_block_matrix(blocks: BlockSystem, mu=None) -> np.ndarray:
    """Dense [[G, D1], [D2, L + diag(mu)]]; small grids only."""
    grid = blocks.grid
    if grid.n_unknowns > FULL_MATRIX_LIMIT:
        raise ValueError(f"{grid.n_unknowns} unknowns exceeds the dense oracle limit")
    F = blocks.L.toarray()
    if mu is not None:
        F = F + np.diag(mu)
    return np.block([[blocks.G.toarray(), blocks.D1.toarray()], [blocks.D2.toarray(), F]])
