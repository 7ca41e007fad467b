"""Experiment driver behind the ``romdot`` command.

Each ``run_*`` function takes a :class:`~romdot.config.RunConfig` and an
output directory, writes its artifacts there and returns a small summary
dict.  All randomness flows from ``run.seed``, so reruns are byte-identical.
"""
from __future__ import annotations

import contextlib
import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .basis import (
    TAG_EIGEN,
    TAG_INITIAL,
    BaselineRecycler,
    BuildLogRow,
    basis_coefficients,
    init_basis,
    load_basis,
    process_system,
    refresh_system_qr,
    save_basis,
)
from .config import RunConfig
from .errors import ConfigError
from .inversion import (
    DotModel,
    FomEvaluator,
    HybridEvaluator,
    InverseProblem,
    TraceRow,
    TrustRegionOptions,
    solve,
)
from .pals import eval_absorption, initial_parameters
from .rom import fom_solutions, fom_transfer, vec

__all__ = [
    "Simulation",
    "thread_limit",
    "build_model",
    "rasterize_phantom",
    "simulate",
    "initial_point",
    "write_pgm",
    "write_csv",
    "run_simulate",
    "run_invert",
    "run_compare_recycling",
    "run_offline",
    "run_coeffs",
    "OFFLINE_BASIS",
    "OFFLINE_MANIFEST",
]

log = logging.getLogger(__name__)

OFFLINE_BASIS = "offline.romb"
OFFLINE_MANIFEST = "offline.manifest"
FLOAT_FMT = "%.5e"


def thread_limit():
    """Cap BLAS/OpenMP pools at ROMDOT_THREADS when it is set."""
    raw = os.environ.get("ROMDOT_THREADS", "").strip()
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ROMDOT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ROMDOT_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def build_model(cfg: RunConfig) -> DotModel:
    return DotModel.build(cfg.grid, cfg.n_src, cfg.n_det, cfg.pals)


def rasterize_phantom(cfg: RunConfig, nodes) -> np.ndarray:
    """Piecewise-constant physical absorption (two levels, sharp edges)."""
    ph, pm = cfg.phantom, cfg.pals
    x, y = nodes[:, 0], nodes[:, 1]
    r = np.hypot(x - ph.cx, y - ph.cy)
    if ph.kind == "disk":
        inside = r < ph.radius
    elif ph.kind == "annulus":
        inside = (r < ph.radius) & (r >= ph.inner_radius)
    else:
        inside = (r < ph.radius) | (np.hypot(x - ph.cx2, y - ph.cy2) < ph.radius2)
    return np.where(inside, pm.mu_in, pm.mu_out)


@dataclass
class Simulation:
    truth: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    noise_norm: float


def simulate(cfg: RunConfig, model: DotModel | None = None) -> Simulation:
    """Data from the rasterized phantom plus relative Gaussian noise."""
    model = model or build_model(cfg)
    truth = rasterize_phantom(cfg, model.nodes)
    psi = fom_transfer(model.schur, model.layout, model.scaled_absorption(truth))
    clean = vec(psi)
    rng = np.random.default_rng(cfg.seed)
    noise = cfg.noise * np.abs(clean) * rng.standard_normal(clean.size)
    return Simulation(truth, clean, clean + noise, float(np.linalg.norm(noise)))


def initial_point(cfg: RunConfig) -> np.ndarray:
    g = cfg.grid
    bounds = (g.xmin, g.xmax, g.ymin, g.ymax)
    return initial_parameters(cfg.pals, bounds, alpha=cfg.init_alpha, radius=cfg.init_radius)


def trust_options(cfg: RunConfig) -> TrustRegionOptions:
    return TrustRegionOptions(radius0=cfg.tr_radius, max_iter=cfg.max_iter)


# ---------------------------------------------------------------- writers


def write_pgm(path, image, lo, hi, maxval=255):
    """ASCII greymap; values are mapped linearly from [lo, hi] to [0, maxval]."""
    image = np.asarray(image, dtype=float)
    span = hi - lo if hi != lo else 1.0
    levels = np.rint(np.clip((image - lo) / span, 0.0, 1.0) * maxval).astype(int)
    rows, cols = levels.shape
    lines = ["P2", f"{cols} {rows}", str(maxval)]
    lines += [" ".join(map(str, row)) for row in levels]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    cols, rows = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:], dtype=int).reshape(rows, cols)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_vector(path, name, values):
    write_csv(path, ["index", name], ((k + 1, float(v)) for k, v in enumerate(values)))


def read_vector(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1]


def image_of(model: DotModel, values) -> np.ndarray:
    """Interior nodal values as an image with the top of the slab first."""
    g = model.grid
    return np.asarray(values).reshape(g.ny - 2, g.nx)[::-1]


def _measurement_rows(psi_vec, n_src, n_det):
    for s in range(n_src):
        for d in range(n_det):
            yield s + 1, d + 1, float(psi_vec[s * n_det + d])


def _outdir(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------- commands


def run_simulate(cfg: RunConfig, out) -> dict:
    out = _outdir(out)
    model = build_model(cfg)
    sim = simulate(cfg, model)
    pm = cfg.pals
    write_pgm(out / "truth.pgm", image_of(model, sim.truth), pm.mu_out, pm.mu_in)
    header = ["source", "detector", "value"]
    write_csv(out / "data_clean.csv", header, _measurement_rows(sim.clean, cfg.n_src, cfg.n_det))
    write_csv(out / "data_noisy.csv", header, _measurement_rows(sim.noisy, cfg.n_src, cfg.n_det))
    (out / "noise_norm.txt").write_text(f"noise_norm={FLOAT_FMT % sim.noise_norm}\n"
                                        f"noise={cfg.noise!r}\nseed={cfg.seed}\n")
    return {"noise_norm": sim.noise_norm, "n_data": sim.clean.size}


def _load_offline(cfg: RunConfig, offline_dir):
    """U_0, X_0 from an offline directory whose manifest matches ``cfg``."""
    if offline_dir is None:
        return None, None
    d = Path(offline_dir)
    if not _manifest_matches(cfg, d):
        raise ConfigError(f"{d}: offline artifacts missing or built for a different config")
    V, tags = load_basis(d / OFFLINE_BASIS)
    return V[:, tags == TAG_EIGEN], V[:, tags == TAG_INITIAL]


def run_invert(cfg: RunConfig, out, mode="rom-hybrid", offline_dir=None) -> dict:
    """Simulate data from the config's phantom and invert it."""
    if mode not in ("fom", "rom-hybrid"):
        raise ConfigError(f"unknown mode {mode!r}")
    out = _outdir(out)
    model = build_model(cfg)
    sim = simulate(cfg, model)
    p0 = initial_point(cfg)
    n_rhs = cfg.n_src + cfg.n_det

    if mode == "fom":
        ev = FomEvaluator(model)
    else:
        U0, X0 = _load_offline(cfg, offline_dir)
        ev = HybridEvaluator(model, k_star=cfg.k_star, tol=cfg.tol_basis, k_eig=cfg.k_eig,
                             U0=U0, X0=X0)
    problem = InverseProblem(sim.noisy, sim.noise_norm, ev, cfg.pals, p0)
    p_star, trace = solve(problem, trust_options(cfg))
    p_star = cfg.pals.clamp(p_star)

    pm = cfg.pals
    recon = eval_absorption(pm, p_star, model.nodes)
    write_pgm(out / "recon.pgm", image_of(model, recon), pm.mu_out, pm.mu_in)
    write_vector(out / "params.csv", "value", p_star)
    with open(out / "trace.csv", "w") as fh:
        fh.write(TraceRow.HEADER + "\n")
        for row in trace.rows:
            fh.write(row.csv() + "\n")

    summary = {
        "mode": mode,
        "converged": trace.converged,
        "reason": trace.reason,
        "final_residual": trace.final_residual,
        "noise_norm": sim.noise_norm,
        "n_fun": trace.n_fun,
        "n_jac": trace.n_jac,
        "full_solves": ev.n_full_solves,
        "full_solves_formula": (trace.n_fun + trace.n_jac) * n_rhs if mode == "fom" else None,
    }
    if mode == "rom-hybrid":
        with open(out / "buildlog.csv", "w") as fh:
            fh.write(BuildLogRow.HEADER + "\n")
            for row in ev.build_log:
                fh.write(row.csv() + "\n")
        if ev.gb is not None:
            save_basis(out / "basis.romb", ev.gb.V, ev.gb.tags)
            summary["basis_order"] = ev.gb.r
        write_csv(out / "system_params.csv", ["system"] + [f"p{k + 1}" for k in range(p0.size)],
                  ([i] + [float(v) for v in q] for i, q in enumerate(ev.system_params)))
        summary["systems"] = ev.systems_done
    true_res = np.linalg.norm(vec(fom_transfer(model.schur, model.layout, model.mu(p_star)))
                              - sim.noisy)
    summary["full_order_residual"] = float(true_res)
    _write_summary(out / "summary.txt", summary)
    return summary


def _write_summary(path, summary):
    lines = []
    for k, v in summary.items():
        if v is None:
            continue
        lines.append(f"{k}={_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def visited_systems(cfg: RunConfig, model: DotModel, n_systems: int):
    """Parameter vectors the hybrid inversion feeds to the basis builder.

    Returns ``[p0, p_1, ..., p_k]`` with k <= n_systems.
    """
    sim = simulate(cfg, model)
    p0 = initial_point(cfg)
    ev = HybridEvaluator(model, k_star=n_systems, tol=cfg.tol_basis, k_eig=cfg.k_eig)
    solve(InverseProblem(sim.noisy, sim.noise_norm, ev, cfg.pals, p0), trust_options(cfg))
    return ev.system_params


def run_compare_recycling(cfg: RunConfig, out, n_systems=2) -> dict:
    """Global-basis recycling against per-RHS recycling on the same systems."""
    out = _outdir(out)
    model = build_model(cfg)
    params = visited_systems(cfg, model, n_systems)
    B = model.layout.B_concat
    gb, per_rhs, X0 = init_basis(model.schur, model.mu(params[0]), B, k_eig=cfg.k_eig,
                                 tol=cfg.tol_basis)
    base = BaselineRecycler(model.schur, gb.V[:, : gb.n_eig], X0)
    rows = []
    tot_ours = tot_base = 0
    for i, p in enumerate(params[1:], 1):
        mu = model.mu(p)
        refresh_system_qr(gb, mu, per_rhs)
        _, ours = process_system(gb, per_rhs, model.schur, B, tol=cfg.tol_basis, system=i)
        _, theirs = base.solve_system(mu, B, tol=cfg.tol_basis, system=i)
        for a, b in zip(ours, theirs):
            rows.append((i, a.rhs, a.iterations, a.init_relres, b.iterations, b.init_relres))
            tot_ours += a.iterations
            tot_base += b.iterations
    header = ["system", "rhs", "its_ours", "init_relres_ours", "its_baseline",
              "init_relres_baseline"]
    rows.append(("total", "", tot_ours, "", tot_base, ""))
    write_csv(out / "recycling.csv", header, rows)
    return {"its_ours": tot_ours, "its_baseline": tot_base, "systems": len(params) - 1}


def _manifest_text(cfg: RunConfig, basis_sha: str) -> str:
    return (f"config_hash={cfg.digest()}\n"
            f"basis_sha256={basis_sha}\n"
            f"nx={cfg.grid.nx}\nny={cfg.grid.ny}\n"
            f"k_eig={cfg.k_eig}\ntol_basis={cfg.tol_basis!r}\n"
            f"n_rhs={cfg.n_src + cfg.n_det}\n")


def _read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest_matches(cfg: RunConfig, d: Path) -> bool:
    man, basis = d / OFFLINE_MANIFEST, d / OFFLINE_BASIS
    if not (man.is_file() and basis.is_file()):
        return False
    try:
        m = _read_manifest(man)
    except (OSError, UnicodeDecodeError):
        return False
    return m.get("config_hash") == cfg.digest() and m.get("basis_sha256") == _sha256(basis)


def run_offline(cfg: RunConfig, out) -> dict:
    """Eigenvectors and initial solutions at p0, cached by config hash."""
    out = _outdir(out)
    if _manifest_matches(cfg, out):
        V, tags = load_basis(out / OFFLINE_BASIS)
        return {"recomputed": False, "columns": V.shape[1]}
    model = build_model(cfg)
    p0 = initial_point(cfg)
    gb, _, _ = init_basis(model.schur, model.mu(p0), model.layout.B_concat, k_eig=cfg.k_eig,
                          tol=cfg.tol_basis)
    save_basis(out / OFFLINE_BASIS, gb.V, gb.tags)
    (out / OFFLINE_MANIFEST).write_text(_manifest_text(cfg, _sha256(out / OFFLINE_BASIS)))
    return {"recomputed": True, "columns": gb.r}


def run_coeffs(cfg: RunConfig, out, basis_path, system: int) -> dict:
    """|coefficients| of full-order solutions at a visited system in the basis directions.

    ``system`` indexes the hybrid run's visited parameters (0 is p0).
    """
    out = _outdir(out)
    V, _ = load_basis(basis_path)
    model = build_model(cfg)
    if V.shape[0] != model.schur.n:
        raise ConfigError(f"basis has {V.shape[0]} rows, model has {model.schur.n} unknowns")
    if system < 0:
        raise ConfigError("system index must be nonnegative")
    params = visited_systems(cfg, model, max(system, 1))
    if system >= len(params):
        raise ConfigError(f"only {len(params)} systems were visited")
    X, _ = fom_solutions(model.schur, model.layout.B_concat, model.mu(params[system]))
    C = np.abs(basis_coefficients(V, X))
    header = ["rhs"] + [f"c{k + 1}" for k in range(V.shape[1])]
    write_csv(out / "coeffs.csv", header,
              ([j + 1] + [float(v) for v in C[:, j]] for j in range(C.shape[1])))
    return {"rows": C.shape[1], "columns": V.shape[1]}
