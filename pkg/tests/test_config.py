from pathlib import Path

import pytest

from romdot.config import load_config, parse_config
from romdot.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = """
grid.nx = 21
grid.ny = 21
run.seed = 4
"""


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.grid.nx == 21 and cfg.seed == 4
    assert cfg.n_src == cfg.n_det == 8
    assert cfg.k_star == 3 and cfg.tol_basis == 1e-7 and cfg.noise == 0.01
    assert cfg.pals.m_bumps == 25


def test_comments_and_spacing_do_not_change_digest():
    a = parse_config(MINIMAL)
    b = parse_config("# header\nrun.seed=4   # trailing\n\ngrid.ny=21\ngrid.nx =21\n")
    assert a.digest() == b.digest()
    assert a.digest() != parse_config(MINIMAL.replace("4", "5")).digest()


@pytest.mark.parametrize("text,match", [
    ("grid.nx = 21\ngrid.ny = 21\n", "run.seed"),
    (MINIMAL + "grid.nz = 3\n", "unknown key"),
    (MINIMAL + "grid.nx = 23\n", "duplicate"),
    (MINIMAL + "run.k_star = two\n", "expects int"),
    (MINIMAL + "run.k_star = 2.5\n", "expects int"),
    (MINIMAL + "just words\n", "key = value"),
    (MINIMAL + "phantom.kind = square\n", "phantom.kind"),
    (MINIMAL + "pals.heaviside = tanh\n", "Heaviside"),
    (MINIMAL + "layout.n_src = 40\n", "fit on a row"),
    (MINIMAL + "run.noise = 1.5\n", "noise"),
    ("grid.nx = 3\ngrid.ny = 3\nrun.seed = 1\n", "5x5"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_annulus_needs_inner_radius_below_outer():
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "phantom.kind = annulus\nphantom.radius = 0.1\n"
                     "phantom.inner_radius = 0.2\n")


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/romdot.cfg")


@pytest.mark.parametrize("name", ["desk.cfg", "large.cfg"])
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.pals.heaviside == "compact"
    assert cfg.pals.level == 0.5 and cfg.seed >= 0
