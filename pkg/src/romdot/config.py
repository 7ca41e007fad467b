"""Flat ``key = value`` run configuration.

Keys are dotted (``grid.nx``, ``pals.eps_h``, ``run.seed`` ...); ``#`` starts a
comment.  Unknown keys are rejected so that typos fail loudly.  ``run.seed``
has no default: every run must name its random stream.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .discretization import GridConfig
from .errors import ConfigError
from .pals import PalsModel

__all__ = ["RunConfig", "PhantomSpec", "load_config", "parse_config"]

PHANTOM_KINDS = ("disk", "annulus", "blobs")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "disk"
    cx: float = 0.6
    cy: float = 0.45
    radius: float = 0.18
    inner_radius: float = 0.08
    # blobs: second disk
    cx2: float = 0.3
    cy2: float = 0.6
    radius2: float = 0.12

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ConfigError(f"phantom.kind must be one of {PHANTOM_KINDS}, got {self.kind!r}")
        if self.radius <= 0 or self.radius2 <= 0:
            raise ConfigError("phantom radii must be positive")
        if self.kind == "annulus" and not 0 < self.inner_radius < self.radius:
            raise ConfigError("annulus needs 0 < phantom.inner_radius < phantom.radius")


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig
    n_src: int
    n_det: int
    pals: PalsModel
    init_alpha: float
    init_radius: float
    seed: int
    noise: float = 0.01
    k_star: int = 3
    k_eig: int = 10
    tol_basis: float = 1e-7
    solver_tol: float = 1e-10
    max_iter: int = 300
    tr_radius: float = 0.5
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    source: str = "<memory>"

    def digest(self) -> str:
        """Hash of the canonical key=value form (independent of comments, order, spacing)."""
        return hashlib.sha256(canonical(self).encode()).hexdigest()

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


# key -> (section, attribute, type)
_KEYS = {
    "grid.nx": int, "grid.ny": int,
    "grid.xmin": float, "grid.xmax": float, "grid.ymin": float, "grid.ymax": float,
    "grid.diffusion": float, "grid.robin": float, "grid.speed": float,
    "layout.n_src": int, "layout.n_det": int,
    "pals.m_bumps": int, "pals.mu_in": float, "pals.mu_out": float,
    "pals.eps_h": float, "pals.eps_n": float, "pals.level": float, "pals.heaviside": str,
    "pals.init_alpha": float, "pals.init_radius": float,
    "run.seed": int, "run.noise": float, "run.k_star": int, "run.k_eig": int,
    "run.tol_basis": float, "run.solver_tol": float, "run.max_iter": int,
    "run.tr_radius": float,
    "phantom.kind": str, "phantom.cx": float, "phantom.cy": float, "phantom.radius": float,
    "phantom.inner_radius": float, "phantom.cx2": float, "phantom.cy2": float,
    "phantom.radius2": float,
}

_DEFAULTS = {
    "layout.n_src": 8, "layout.n_det": 8,
    "pals.init_alpha": 1.0, "pals.init_radius": 0.15,
}


def _convert(key, text, lineno, source):
    typ = _KEYS[key]
    try:
        if typ is int:
            value = float(text)
            if value != int(value):
                raise ValueError
            return int(value)
        return typ(text)
    except ValueError:
        raise ConfigError(f"{source}:{lineno}: {key} expects {typ.__name__}, got {text!r}") from None


def parse_config(text: str, source="<memory>") -> RunConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = _convert(key, value, lineno, source)
    return _build(raw, source)


def _section(raw, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in raw.items() if k.startswith(prefix + ".")}


def _build(raw, source) -> RunConfig:
    if "run.seed" not in raw:
        raise ConfigError(f"{source}: run.seed is required")
    for k in ("grid.nx", "grid.ny"):
        if k not in raw:
            raise ConfigError(f"{source}: {k} is required")
    vals = {**_DEFAULTS, **raw}
    try:
        grid = GridConfig(**_section(vals, "grid"))
        pals_kw = {k: v for k, v in _section(vals, "pals").items() if not k.startswith("init_")}
        pals = PalsModel(**pals_kw)
        phantom = PhantomSpec(**_section(vals, "phantom"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: {exc}") from exc

    run = _section(vals, "run")
    cfg = RunConfig(
        grid=grid,
        n_src=vals["layout.n_src"],
        n_det=vals["layout.n_det"],
        pals=pals,
        init_alpha=vals["pals.init_alpha"],
        init_radius=vals["pals.init_radius"],
        phantom=phantom,
        source=str(source),
        **run,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.n_src < 1 or cfg.n_det < 1:
        raise ConfigError("layout needs at least one source and one detector")
    if cfg.n_src > cfg.grid.nx - 2 or cfg.n_det > cfg.grid.nx - 2:
        raise ConfigError(f"at most {cfg.grid.nx - 2} sources/detectors fit on a row of {cfg.grid.nx}")
    if not 0 <= cfg.noise < 1:
        raise ConfigError("run.noise must lie in [0, 1)")
    if cfg.k_star < 0 or cfg.k_eig < 1:
        raise ConfigError("run.k_star must be >= 0 and run.k_eig >= 1")
    if cfg.tol_basis <= 0 or cfg.solver_tol <= 0 or cfg.tr_radius <= 0:
        raise ConfigError("tolerances and trust radius must be positive")
    if cfg.max_iter < 1:
        raise ConfigError("run.max_iter must be >= 1")
    if cfg.init_radius <= 0:
        raise ConfigError("pals.init_radius must be positive")


def canonical(cfg: RunConfig) -> str:
    """Sorted key=value dump covering every setting."""
    g, p, ph = cfg.grid, cfg.pals, cfg.phantom
    out = {}
    for f in fields(g):
        out[f"grid.{f.name}"] = getattr(g, f.name)
    for f in fields(p):
        out[f"pals.{f.name}"] = getattr(p, f.name)
    for f in fields(ph):
        out[f"phantom.{f.name}"] = getattr(ph, f.name)
    out["layout.n_src"], out["layout.n_det"] = cfg.n_src, cfg.n_det
    out["pals.init_alpha"], out["pals.init_radius"] = cfg.init_alpha, cfg.init_radius
    for name in ("seed", "noise", "k_star", "k_eig", "tol_basis", "solver_tol", "max_iter",
                 "tr_radius"):
        out[f"run.{name}"] = getattr(cfg, name)
    return "".join(f"{k}={out[k]!r}\n" for k in sorted(out))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path)
