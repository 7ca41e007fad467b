"""Parametric level-set absorption images built from Wendland C2 bumps.

Parameter layout for ``m`` bumps (length 4m)::

    p = [alpha_1..alpha_m, beta_1..beta_m, cx_1, cy_1, ..., cx_m, cy_m]

The level set is ``phi(x) = sum_j alpha_j psi(|beta_j (x - c_j)|_eps)`` with
``psi(r) = (1 - r)_+^4 (4 r + 1)`` and the smoothed norm
``|v|_eps = sqrt(|v|^2 + eps^2)``; absorption is a smoothed Heaviside blend of
``mu_in`` and ``mu_out`` across ``phi = level``.  Because the bumps have
compact support, phi vanishes away from all of them; a positive level with the
``compact`` Heaviside keeps that background at exactly ``mu_out``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PalsModel",
    "wendland",
    "heaviside",
    "dirac",
    "eval_levelset",
    "eval_absorption",
    "absorption_jacobian",
    "absorption_jacobians",
    "initial_parameters",
]

BETA_FLOOR = 1e-6


def wendland(r):
    r = np.asarray(r, dtype=float)
    t = np.clip(1.0 - r, 0.0, None)
    return t**4 * (4.0 * r + 1.0)


def _wendland_slope_over_r(r):
    # psi'(r) / r = -20 (1 - r)^3, finite at r = 0
    t = np.clip(1.0 - np.asarray(r, dtype=float), 0.0, None)
    return -20.0 * t**3


def heaviside(t, eps, kind="arctan"):
    """Smoothed Heaviside.

    ``arctan``: 1/2 (1 + 2/pi arctan(t/eps)), nonzero everywhere.
    ``compact``: exactly 0 below -eps and 1 above eps, C1 in between.
    """
    t = np.asarray(t, dtype=float)
    if kind == "arctan":
        return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(t / eps))
    if kind == "compact":
        u = np.clip(t / eps, -1.0, 1.0)
        # pin the saturated branches; sin(pi) is not exactly zero in floating point
        return np.where(u <= -1.0, 0.0,
                        np.where(u >= 1.0, 1.0, 0.5 * (1.0 + u + np.sin(np.pi * u) / np.pi)))
    raise ValueError(f"unknown Heaviside kind {kind!r}")


def dirac(t, eps, kind="arctan"):
    """Derivative of :func:`heaviside`."""
    t = np.asarray(t, dtype=float)
    if kind == "arctan":
        return (eps / np.pi) / (eps * eps + t * t)
    if kind == "compact":
        u = t / eps
        return np.where(np.abs(u) < 1.0, 0.5 * (1.0 + np.cos(np.pi * u)) / eps, 0.0)
    raise ValueError(f"unknown Heaviside kind {kind!r}")


@dataclass(frozen=True)
class PalsModel:
    m_bumps: int = 25
    mu_in: float = 1.0
    mu_out: float = 0.0
    eps_h: float = 0.05
    eps_n: float = 1e-3
    level: float = 0.0
    heaviside: str = "arctan"

    def __post_init__(self):
        if self.m_bumps < 1:
            raise ValueError("need at least one bump")
        if self.mu_in < 0 or self.mu_out < 0:
            raise ValueError("absorption levels must be nonnegative")
        if self.eps_h <= 0 or self.eps_n < 0:
            raise ValueError("smoothing widths must be positive")
        if self.heaviside not in ("arctan", "compact"):
            raise ValueError(f"unknown Heaviside kind {self.heaviside!r}")

    @property
    def n_params(self) -> int:
        return 4 * self.m_bumps

    def split(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {p.shape}")
        m = self.m_bumps
        return p[:m], p[m : 2 * m], p[2 * m :].reshape(m, 2)

    def beta_slice(self) -> slice:
        return slice(self.m_bumps, 2 * self.m_bumps)

    def clamp(self, p):
        """Return a copy of ``p`` with dilations floored at BETA_FLOOR."""
        p = np.array(p, dtype=float)
        sl = self.beta_slice()
        p[sl] = np.maximum(p[sl], BETA_FLOOR)
        return p

    def owner(self, k: int) -> int:
        """Index of the bump that parameter ``k`` belongs to."""
        m = self.m_bumps
        if not 0 <= k < 4 * m:
            raise IndexError(f"parameter index {k} out of range [0, {4 * m})")
        if k < 2 * m:
            return k % m
        return (k - 2 * m) // 2


def _radii(model, beta, centers, nodes):
    d = nodes[None, :, :] - centers[:, None, :]  # (m, n, 2)
    dist2 = np.einsum("mnk,mnk->mn", d, d)
    r = np.sqrt(beta[:, None] ** 2 * dist2 + model.eps_n**2)
    return d, dist2, r


def eval_levelset(model: PalsModel, p, nodes) -> np.ndarray:
    alpha, beta, centers = model.split(p)
    if np.any(beta <= 0):
        raise ValueError("dilations must be positive")
    nodes = np.asarray(nodes, dtype=float)
    _, _, r = _radii(model, beta, centers, nodes)
    return alpha @ wendland(r)


def eval_absorption(model: PalsModel, p, nodes) -> np.ndarray:
    phi = eval_levelset(model, p, nodes)
    H = heaviside(phi - model.level, model.eps_h, model.heaviside)
    return model.mu_out + (model.mu_in - model.mu_out) * H


def absorption_jacobians(model: PalsModel, p, nodes):
    """Sparse derivatives of the absorption for every parameter.

    Returns a list of ``(support, values)`` pairs, one per parameter, where
    ``support`` indexes ``nodes`` inside the owning bump's compact support.
    """
    alpha, beta, centers = model.split(p)
    if np.any(beta <= 0):
        raise ValueError("dilations must be positive")
    nodes = np.asarray(nodes, dtype=float)
    m = model.m_bumps
    d, dist2, r = _radii(model, beta, centers, nodes)
    psi = wendland(r)
    phi = alpha @ psi
    scale = (model.mu_in - model.mu_out) * dirac(phi - model.level, model.eps_h, model.heaviside)
    slope = _wendland_slope_over_r(r)

    out = [None] * (4 * m)
    for j in range(m):
        s = np.flatnonzero(r[j] < 1.0)
        sc = scale[s]
        out[j] = (s, sc * psi[j, s])
        out[m + j] = (s, sc * alpha[j] * slope[j, s] * beta[j] * dist2[j, s])
        gc = -sc * alpha[j] * slope[j, s] * beta[j] ** 2
        out[2 * m + 2 * j] = (s, gc * d[j, s, 0])
        out[2 * m + 2 * j + 1] = (s, gc * d[j, s, 1])
    return out


def absorption_jacobian(model: PalsModel, p, nodes, k: int):
    """Derivative of the absorption with respect to parameter ``k`` (0-based)."""
    j = model.owner(k)
    alpha, beta, centers = model.split(p)
    if np.any(beta <= 0):
        raise ValueError("dilations must be positive")
    nodes = np.asarray(nodes, dtype=float)
    m = model.m_bumps
    d, dist2, r = _radii(model, beta, centers, nodes)
    s = np.flatnonzero(r[j] < 1.0)
    phi = alpha @ wendland(r[:, s])
    sc = (model.mu_in - model.mu_out) * dirac(phi - model.level, model.eps_h, model.heaviside)
    if k < m:
        return s, sc * wendland(r[j, s])
    slope = _wendland_slope_over_r(r[j, s])
    if k < 2 * m:
        return s, sc * alpha[j] * slope * beta[j] * dist2[j, s]
    axis = (k - 2 * m) % 2
    return s, -sc * alpha[j] * slope * beta[j] ** 2 * d[j, s, axis]


def initial_parameters(model: PalsModel, bounds, alpha=1.0, radius=None) -> np.ndarray:
    """Bumps on a regular grid over ``bounds = (xmin, xmax, ymin, ymax)``, equal weights.

    Grid columns/rows are ceil(sqrt(m)); the first m grid points are used.
    ``radius`` defaults to 0.35 of the bump spacing.
    """
    xmin, xmax, ymin, ymax = bounds
    m = model.m_bumps
    side = int(np.ceil(np.sqrt(m)))
    fx = (np.arange(side) + 0.5) / side
    cx = xmin + (xmax - xmin) * fx
    cy = ymin + (ymax - ymin) * fx
    CX, CY = np.meshgrid(cx, cy)
    centers = np.column_stack([CX.ravel(), CY.ravel()])[:m]
    if radius is None:
        radius = 0.35 * min(xmax - xmin, ymax - ymin) / side
    p = np.concatenate([np.full(m, float(alpha)), np.full(m, 1.0 / radius), centers.ravel()])
    return p
