import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from romdot import harness
from romdot.basis import TAG_EIGEN, TAG_INITIAL, load_basis
from romdot.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, main
from romdot.config import parse_config
from romdot.errors import SolverError

SMALL = """
grid.nx = 17
grid.ny = 17
layout.n_src = 3
layout.n_det = 3
pals.m_bumps = 9
pals.mu_in = 30.0
pals.mu_out = 3.0
pals.eps_h = 0.3
pals.level = 0.5
pals.heaviside = compact
pals.init_alpha = 1.0
pals.init_radius = 0.2
run.seed = 7
run.k_star = 2
run.k_eig = 4
phantom.kind = disk
phantom.cx = 0.4
phantom.cy = 0.55
phantom.radius = 0.2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def run(*args):
    return main([str(a) for a in args])


def test_simulate_outputs(cfg_path, tmp_path, capsys):
    out = tmp_path / "sim"
    assert run("simulate", "--config", cfg_path, "--out", out) == EXIT_OK
    assert "noise_norm=" in capsys.readouterr().out
    img = harness.read_pgm(out / "truth.pgm")
    assert img.shape == (15, 17) and set(np.unique(img)) == {0, 255}
    clean = np.loadtxt(out / "data_clean.csv", delimiter=",", skiprows=1)
    noisy = np.loadtxt(out / "data_noisy.csv", delimiter=",", skiprows=1)
    assert clean.shape == (9, 3) and np.all(clean[:, 2] > 0)
    assert not np.array_equal(clean[:, 2], noisy[:, 2])
    header = (out / "data_clean.csv").read_text().splitlines()[0]
    assert header == "source,detector,value"


def test_simulate_is_deterministic_and_noise_free_when_asked(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run("simulate", "--config", cfg_path, "--out", a)
    run("simulate", "--config", cfg_path, "--out", b)
    assert (a / "data_noisy.csv").read_bytes() == (b / "data_noisy.csv").read_bytes()
    quiet = tmp_path / "quiet.cfg"
    quiet.write_text(SMALL + "run.noise = 0\n")
    run("simulate", "--config", quiet, "--out", tmp_path / "q")
    q = tmp_path / "q"
    assert (q / "data_clean.csv").read_bytes() == (q / "data_noisy.csv").read_bytes()


def test_phantom_kinds():
    cfg = parse_config(SMALL)
    nodes = harness.build_model(cfg).nodes
    disk = harness.rasterize_phantom(cfg, nodes)
    ann_cfg = SMALL.replace("kind = disk", "kind = annulus") + "phantom.inner_radius = 0.1\n"
    ann = harness.rasterize_phantom(parse_config(ann_cfg), nodes)
    blobs = harness.rasterize_phantom(parse_config(SMALL.replace("kind = disk", "kind = blobs")),
                                      nodes)
    assert set(np.unique(disk)) == {3.0, 30.0}
    assert (ann == 30).sum() < (disk == 30).sum()
    assert (blobs == 30).sum() > (disk == 30).sum()


@pytest.mark.parametrize("mode", ["fom", "rom-hybrid"])
def test_invert(cfg_path, tmp_path, mode, capsys):
    out = tmp_path / mode
    assert run("invert", "--config", cfg_path, "--mode", mode, "--out", out) == EXIT_OK
    printed = capsys.readouterr().out
    assert "converged=True" in printed and "n_fun=" in printed
    for name in ("recon.pgm", "params.csv", "trace.csv", "summary.txt"):
        assert (out / name).is_file()
    hybrid_files = ("buildlog.csv", "basis.romb", "system_params.csv")
    assert all((out / f).is_file() == (mode == "rom-hybrid") for f in hybrid_files)
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0].startswith("iteration,residual_norm")


def test_offline_cache_and_reuse(cfg_path, tmp_path):
    out = tmp_path / "off"
    cfg = parse_config(SMALL)
    first = harness.run_offline(cfg, out)
    assert first["recomputed"] and first["columns"] == 4 + 6
    V, tags = load_basis(out / harness.OFFLINE_BASIS)
    assert list(tags).count(TAG_EIGEN) == 4 and list(tags).count(TAG_INITIAL) == 6
    assert not harness.run_offline(cfg, out)["recomputed"]

    manifest = out / harness.OFFLINE_MANIFEST
    manifest.write_text(manifest.read_text().replace("config_hash=", "config_hash=0"))
    assert harness.run_offline(cfg, out)["recomputed"]
    assert not harness.run_offline(cfg, out)["recomputed"]

    # a reused offline basis reproduces the self-computed hybrid run
    a = harness.run_invert(cfg, tmp_path / "a", offline_dir=out)
    b = harness.run_invert(cfg, tmp_path / "b")
    assert a["n_fun"] == b["n_fun"]
    assert a["full_solves"] == b["full_solves"] - 6

    # an offline basis built for a different configuration is refused
    other = tmp_path / "other.cfg"
    other.write_text(SMALL.replace("run.seed = 7", "run.seed = 8"))
    assert run("invert", "--config", other, "--offline", out,
               "--out", tmp_path / "c") == EXIT_CONFIG


def test_compare_recycling_table(cfg_path, tmp_path):
    out = tmp_path / "cmp"
    assert run("compare-recycling", "--config", cfg_path, "--out", out) == EXIT_OK
    lines = (out / "recycling.csv").read_text().splitlines()
    assert lines[0] == ("system,rhs,its_ours,init_relres_ours,its_baseline,"
                        "init_relres_baseline")
    assert lines[-1].startswith("total,")
    body = [l.split(",") for l in lines[1:-1]]
    assert len(body) == 2 * 6
    tot = lines[-1].split(",")
    assert int(tot[2]) == sum(int(r[2]) for r in body)
    assert int(tot[4]) == sum(int(r[4]) for r in body)


def test_coeffs(cfg_path, tmp_path):
    inv = tmp_path / "inv"
    run("invert", "--config", cfg_path, "--out", inv)
    V, _ = load_basis(inv / "basis.romb")
    out = tmp_path / "coef"
    assert run("coeffs", "--config", cfg_path, "--basis", inv / "basis.romb", "--system", 1,
               "--out", out) == EXIT_OK
    rows = np.loadtxt(out / "coeffs.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rows.shape == (6, 1 + V.shape[1])
    assert np.all(rows[:, 1:] >= 0)


def test_exit_codes(cfg_path, tmp_path, monkeypatch):
    bad = tmp_path / "bad.cfg"
    bad.write_text("grid.nx = 9\n")
    assert run("simulate", "--config", bad, "--out", tmp_path / "x") == EXIT_CONFIG
    assert run("simulate", "--config", tmp_path / "missing.cfg") == EXIT_CONFIG

    junk = tmp_path / "junk.romb"
    junk.write_bytes(b"nope")
    assert run("coeffs", "--config", cfg_path, "--basis", junk,
               "--out", tmp_path / "y") == EXIT_IO

    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("simulate", "--config", cfg_path, "--out", blocker / "sub") == EXIT_IO

    def boom(*a, **k):
        raise SolverError("forced")

    monkeypatch.setattr(harness, "run_simulate", boom)
    assert run("simulate", "--config", cfg_path, "--out", tmp_path / "z") == EXIT_SOLVER


def test_thread_limit_env(monkeypatch):
    monkeypatch.setenv("ROMDOT_THREADS", "1")
    with harness.thread_limit():
        pass
    monkeypatch.setenv("ROMDOT_THREADS", "zero")
    with pytest.raises(Exception):
        harness.thread_limit()


def test_console_script_entry(cfg_path, tmp_path):
    env = dict(os.environ, ROMDOT_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "romdot.cli", "simulate", "--config",
                           str(cfg_path), "--out", str(tmp_path / "s")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert Path(tmp_path / "s" / "truth.pgm").is_file()
