"""Nonlinear least-squares inversion of boundary data for PaLS parameters.

Evaluators map parameters to the transfer function and its Jacobian from
either the full-order Schur system, a reduced model, or the hybrid scheme in
which the first few parameter vectors feed the basis builder and every later
evaluation uses the resulting reduced model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import pals as pals_mod
from .basis import init_basis, process_system, refresh_system_qr
from .discretization import (
    Grid,
    SchurOperator,
    SourceDetectorLayout,
    assemble_blocks,
    build_grid,
    default_positions,
    effective_layout,
    schur_operator,
)
from .errors import SolverError
from .rom import jacobian_from_solutions, reduce, rom_jacobian, rom_solutions, vec

__all__ = [
    "DotModel",
    "FomEvaluator",
    "RomEvaluator",
    "HybridEvaluator",
    "InverseProblem",
    "TrustRegionOptions",
    "TraceRow",
    "OptTrace",
    "residual",
    "dogleg_step",
    "solve",
    "hybrid_drive",
]

log = logging.getLogger(__name__)


@dataclass
class DotModel:
    """Discretized slab, probe layout and image parameterization in one place."""

    grid: Grid
    schur: SchurOperator
    layout: SourceDetectorLayout
    pals: pals_mod.PalsModel
    nodes: np.ndarray

    @classmethod
    def build(cls, grid_cfg, n_src, n_det, pals):
        grid = build_grid(grid_cfg)
        blocks = assemble_blocks(grid)
        src = grid.boundary_index(default_positions(grid.nx, n_src), top=True)
        det = grid.boundary_index(default_positions(grid.nx, n_det), top=False)
        layout = effective_layout(blocks, src, det)
        return cls(grid, schur_operator(blocks), layout, pals, grid.interior_coords())

    @property
    def h2(self) -> float:
        return self.grid.h ** 2

    def scaled_absorption(self, mu_phys):
        return self.h2 * np.asarray(mu_phys, dtype=float)

    def mu(self, p) -> np.ndarray:
        """Diagonal of the Schur operator's absorption term at parameters p."""
        p = self.pals.clamp(p)
        return self.h2 * pals_mod.eval_absorption(self.pals, p, self.nodes)

    def derivs(self, p):
        p = self.pals.clamp(p)
        return [(s, self.h2 * d) for s, d in pals_mod.absorption_jacobians(self.pals, p, self.nodes)]


def _key(p):
    return np.asarray(p, dtype=float).tobytes()


class FomEvaluator:
    """Full-order evaluations; forward solves on transfer, adjoint solves on Jacobian."""

    mode = "fom"

    def __init__(self, model: DotModel):
        self.model = model
        self.n_fun = 0
        self.n_jac = 0
        self.n_full_solves = 0
        self._cache = None

    def _factor(self, p):
        key = _key(p)
        if self._cache is None or self._cache[0] != key:
            lu = spla.splu(self.model.schur.matrix(self.model.mu(p)))
            XB = lu.solve(self.model.layout.B_tilde)
            self.n_full_solves += XB.shape[1]
            self._cache = (key, lu, XB)
        return self._cache[1], self._cache[2]

    def transfer(self, p):
        self.n_fun += 1
        _, XB = self._factor(p)
        return self.model.layout.C_tilde.T @ XB

    def jacobian(self, p):
        self.n_jac += 1
        lu, XB = self._factor(p)
        XC = lu.solve(self.model.layout.C_tilde)
        self.n_full_solves += XC.shape[1]
        return jacobian_from_solutions(XB, XC, self.model.derivs(p))


class RomEvaluator:
    mode = "rom"

    def __init__(self, model: DotModel, rm):
        self.model = model
        self.rm = rm
        self.n_fun = 0
        self.n_jac = 0
        self.n_full_solves = 0

    def transfer(self, p):
        self.n_fun += 1
        YB, _ = rom_solutions(self.rm, self.model.mu(p))
        return self.rm.C_r.T @ YB

    def jacobian(self, p):
        self.n_jac += 1
        return rom_jacobian(self.rm, self.model.mu(p), self.model.derivs(p))


class HybridEvaluator:
    """Full-order recycled solves for the first ``k_star`` new parameter vectors, ROM after.

    The first evaluated point seeds the basis (eigenvectors plus initial
    solutions); the next ``k_star`` distinct points are processed as systems
    of the inner-outer recycling scheme.  Their solutions supply the
    optimizer's function and Jacobian values at those points.
    """

    mode = "rom-hybrid"

    def __init__(self, model: DotModel, k_star=3, tol=1e-7, k_eig=10, maxit=None,
                 U0=None, X0=None):
        if k_star < 0:
            raise ValueError("k_star must be nonnegative")
        self.model = model
        self.k_star = k_star
        self.tol = tol
        self.k_eig = k_eig
        self.maxit = maxit
        self._U0, self._X0 = U0, X0
        self.gb = None
        self.per_rhs = None
        self.X0 = None
        self.rm = None
        self.build_log = []
        self.system_params = []
        self._solutions = {}
        self.n_fun = 0
        self.n_jac = 0
        self.n_full_solves = 0

    @property
    def systems_done(self) -> int:
        return max(len(self.system_params) - 1, 0)

    def _full(self, p):
        key = _key(p)
        if key in self._solutions:
            return self._solutions[key]
        m = self.model
        B = m.layout.B_concat
        if self.gb is None:
            mu0 = m.mu(p)
            self.gb, self.per_rhs, X = init_basis(
                m.schur, mu0, B, k_eig=self.k_eig, tol=self.tol, maxit=self.maxit,
                U0=self._U0, X0=self._X0)
            self.X0 = X
            if self._X0 is None:
                self.n_full_solves += B.shape[1]
        elif self.rm is None:
            i = len(self.system_params)
            refresh_system_qr(self.gb, m.mu(p), self.per_rhs)
            X, rows = process_system(self.gb, self.per_rhs, m.schur, B, tol=self.tol,
                                     system=i, maxit=self.maxit)
            self.build_log.extend(rows)
            self.n_full_solves += sum(1 for r in rows if r.iterations > 0)
        else:
            return None
        self.system_params.append(np.array(p, dtype=float))
        self._solutions[key] = X
        if self.systems_done >= self.k_star:
            self.rm = reduce(self.gb.V, m.schur, m.layout.B_tilde, m.layout.C_tilde,
                             A_star_V=self.gb.A_star_V)
            log.info("reduced model of order %d built after %d systems", self.rm.r,
                     self.systems_done)
        return X

    def transfer(self, p):
        self.n_fun += 1
        X = self._full(p)
        if X is not None:
            return self.model.layout.C_tilde.T @ X[:, : self.model.layout.n_src]
        YB, _ = rom_solutions(self.rm, self.model.mu(p))
        return self.rm.C_r.T @ YB

    def jacobian(self, p):
        self.n_jac += 1
        X = self._full(p)
        if X is not None:
            n_src = self.model.layout.n_src
            return jacobian_from_solutions(X[:, :n_src], X[:, n_src:], self.model.derivs(p))
        return rom_jacobian(self.rm, self.model.mu(p), self.model.derivs(p))


@dataclass
class InverseProblem:
    data: np.ndarray
    noise_norm: float
    evaluator: object
    pals: pals_mod.PalsModel
    p0: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        lay = getattr(getattr(self.evaluator, "model", None), "layout", None)
        if lay is not None and self.data.shape != (lay.n_src * lay.n_det,):
            raise ValueError(f"data length {self.data.shape} != n_src*n_det")


@dataclass
class TrustRegionOptions:
    radius0: float = 0.5
    max_radius: float = 20.0
    max_iter: int = 300
    stop_factor: float = 1.1
    eta: float = 1e-4
    xtol: float = 1e-10
    gtol: float = 1e-10
    divergence: float = 1e6


@dataclass
class TraceRow:
    iteration: int
    residual_norm: float
    radius: float
    step_norm: float
    accepted: bool
    n_fun: int
    n_jac: int

    HEADER = "iteration,residual_norm,radius,step_norm,accepted,n_fun,n_jac"

    def csv(self) -> str:
        return (f"{self.iteration},{self.residual_norm:.5e},{self.radius:.5e},"
                f"{self.step_norm:.5e},{int(self.accepted)},{self.n_fun},{self.n_jac}")


@dataclass
class OptTrace:
    rows: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    n_fun: int = 0
    n_jac: int = 0
    final_residual: float = float("nan")


def residual(problem: InverseProblem, p):
    psi = problem.evaluator.transfer(p)
    res = vec(psi) - problem.data
    return res, float(np.linalg.norm(res))


def dogleg_step(J, res, radius):
    """Dogleg minimizer of ||res + J s|| subject to ||s|| <= radius."""
    g = J.T @ res
    gn, *_ = np.linalg.lstsq(J, -res, rcond=None)
    if np.linalg.norm(gn) <= radius:
        return gn
    gnorm = np.linalg.norm(g)
    Jg = J @ g
    t = gnorm**2 / max(Jg @ Jg, np.finfo(float).tiny)
    sd = -t * g
    if np.linalg.norm(sd) >= radius:
        return -(radius / gnorm) * g
    d = gn - sd
    a = d @ d
    b = 2.0 * (sd @ d)
    c = sd @ sd - radius**2
    tau = (-b + np.sqrt(b * b - 4.0 * a * c)) / (2.0 * a)
    return sd + tau * d


def solve(problem: InverseProblem, options: TrustRegionOptions | None = None):
    """Trust-region Gauss-Newton with dogleg steps.

    Stops when the residual norm drops to ``stop_factor * noise_norm``; the
    Jacobian is re-evaluated only after accepted steps.
    """
    opt = options or TrustRegionOptions()
    ev = problem.evaluator
    pm = problem.pals
    trace = OptTrace()
    target = opt.stop_factor * problem.noise_norm

    p = pm.clamp(problem.p0)
    res, f = residual(problem, p)
    f0 = f
    radius = opt.radius0
    trace.rows.append(TraceRow(0, f, radius, 0.0, True, ev.n_fun, ev.n_jac))

    def finish(converged, reason):
        trace.converged = converged
        trace.reason = reason
        trace.n_fun, trace.n_jac = ev.n_fun, ev.n_jac
        trace.final_residual = f
        return p, trace

    if f <= target:
        return finish(True, "residual below noise level")
    J = ev.jacobian(p)
    g0 = float(np.linalg.norm(J.T @ res))
    for it in range(1, opt.max_iter + 1):
        g = J.T @ res
        if np.linalg.norm(g) <= opt.gtol * g0:
            return finish(False, "gradient tolerance")
        s = dogleg_step(J, res, radius)
        p_t = pm.clamp(p + s)
        s = p_t - p
        snorm = float(np.linalg.norm(s))
        if snorm <= opt.xtol * (np.linalg.norm(p) + opt.xtol):
            return finish(False, "step tolerance")
        res_t, f_t = residual(problem, p_t)
        if not np.isfinite(f_t) or f_t > opt.divergence * f0:
            trace.rows.append(TraceRow(it, f_t, radius, snorm, False, ev.n_fun, ev.n_jac))
            finish(False, "divergence")
            raise SolverError(f"optimizer diverged at iteration {it}", trace)
        model_res = res + J @ s
        pred = f * f - model_res @ model_res
        ared = f * f - f_t * f_t
        rho = ared / pred if pred > 0 else -np.inf
        accepted = rho > opt.eta and f_t < f
        if rho < 0.25:
            radius *= 0.25
        elif rho > 0.75:
            radius = min(max(radius, 2.0 * snorm), opt.max_radius)
        if accepted:
            p, res, f = p_t, res_t, f_t
        trace.rows.append(TraceRow(it, f, radius, snorm, accepted, ev.n_fun, ev.n_jac))
        if accepted:
            if f <= target:
                return finish(True, "residual below noise level")
            J = ev.jacobian(p)
        if radius <= opt.xtol:
            return finish(False, "trust radius collapsed")
    return finish(False, "iteration limit")


def hybrid_drive(model: DotModel, data, noise_norm, p0, k_star=3, tol_basis=1e-7, k_eig=10,
                 options=None, U0=None, X0=None):
    """Invert with the hybrid evaluator; returns ``(p_star, basis, trace, evaluator)``."""
    ev = HybridEvaluator(model, k_star=k_star, tol=tol_basis, k_eig=k_eig, U0=U0, X0=X0)
    if k_star == 0:
        log.warning("k_star = 0: reduced model uses the initial-parameter basis only")
    problem = InverseProblem(data, noise_norm, ev, model.pals, p0)
    p_star, trace = solve(problem, options)
    return p_star, ev.gb, trace, ev
