import numpy as np
import pytest
from scipy.optimize import brentq
from hypothesis import given
from hypothesis import strategies as st

from romdot.pals import (
    BETA_FLOOR,
    PalsModel,
    absorption_jacobian,
    absorption_jacobians,
    dirac,
    eval_absorption,
    eval_levelset,
    heaviside,
    initial_parameters,
    wendland,
)

from ._oracles import central_difference


def nodes(n=15):
    x = np.linspace(0, 1, n)
    X, Y = np.meshgrid(x, x)
    return np.column_stack([X.ravel(), Y.ravel()])


def test_wendland_profile():
    assert wendland(0.0) == 1.0
    assert wendland(1.0) == 0.0
    assert np.all(wendland(np.array([1.2, 3.0])) == 0.0)
    # C2 at the support edge: value, slope and curvature vanish
    h = 1e-4
    slope = (wendland(1 - h) - wendland(1 - 2 * h)) / h
    assert abs(slope) < 1e-9


@pytest.mark.parametrize("kind", ["arctan", "compact"])
@given(t=st.floats(-2, 2), eps=st.floats(0.05, 1.0))
def test_dirac_is_heaviside_derivative(kind, t, eps):
    step = 1e-6
    fd = (heaviside(t + step, eps, kind) - heaviside(t - step, eps, kind)) / (2 * step)
    # the compact kind has kinks in its derivative at +-eps only
    assert dirac(t, eps, kind) == pytest.approx(fd, rel=1e-5, abs=1e-4)


def test_compact_heaviside_saturates():
    assert heaviside(-0.5, 0.1, "compact") == 0.0
    assert heaviside(0.5, 0.1, "compact") == 1.0
    assert heaviside(0.0, 0.1, "compact") == 0.5
    assert dirac(0.2, 0.1, "compact") == 0.0


def test_unknown_heaviside_kind():
    with pytest.raises(ValueError):
        heaviside(0.0, 0.1, "tanh")
    with pytest.raises(ValueError):
        PalsModel(heaviside="tanh")


class TestModel:
    def test_split_and_owner(self):
        pm = PalsModel(3)
        p = np.arange(12.0)
        a, b, c = pm.split(p)
        assert list(a) == [0, 1, 2] and list(b) == [3, 4, 5]
        assert c.tolist() == [[6, 7], [8, 9], [10, 11]]
        assert [pm.owner(k) for k in range(12)] == [0, 1, 2, 0, 1, 2, 0, 0, 1, 1, 2, 2]
        with pytest.raises(IndexError):
            pm.owner(12)

    def test_split_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            PalsModel(3).split(np.zeros(11))

    def test_clamp_floors_dilations_only(self):
        pm = PalsModel(2)
        p = pm.clamp([-1.0, -1.0, -3.0, 0.5, -1.0, -1.0, -1.0, -1.0])
        assert p[2] == BETA_FLOOR and p[3] == 0.5
        assert np.all(p[[0, 1, 4, 5, 6, 7]] == -1.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            PalsModel(0)
        with pytest.raises(ValueError):
            PalsModel(mu_in=-1.0)
        with pytest.raises(ValueError):
            PalsModel(eps_h=0.0)


def test_single_bump_superlevel_set_is_a_disk():
    pm = PalsModel(1, mu_in=5.0, mu_out=1.0, eps_h=1e-3, eps_n=0.0, level=0.5,
                   heaviside="compact")
    p = np.array([1.0, 1 / 0.3, 0.5, 0.5])
    xy = nodes(41)
    mu = eval_absorption(pm, p, xy)
    r = np.hypot(xy[:, 0] - 0.5, xy[:, 1] - 0.5)
    edge = 0.3 * brentq(lambda s: wendland(s) - 0.5, 0.0, 1.0)
    assert np.all(mu[r < edge - 0.01] == 5.0)
    assert np.all(mu[r > edge + 0.01] == 1.0)


def test_compact_background_is_exact():
    pm = PalsModel(4, mu_in=3.0, mu_out=1.0, eps_h=0.2, level=0.5, heaviside="compact")
    p = initial_parameters(pm, (0, 1, 0, 1), alpha=1.0, radius=0.1)
    xy = nodes(31)
    phi = eval_levelset(pm, p, xy)
    mu = eval_absorption(pm, p, xy)
    assert np.all(mu[phi == 0] == 1.0)


def test_rejects_nonpositive_dilation():
    pm = PalsModel(1)
    with pytest.raises(ValueError):
        eval_levelset(pm, np.array([1.0, 0.0, 0.5, 0.5]), nodes(5))


@pytest.mark.parametrize("kind,level", [("arctan", 0.0), ("compact", 0.4)])
@given(seed=st.integers(0, 2**32 - 1))
def test_jacobians_match_finite_differences(kind, level, seed):
    rng = np.random.default_rng(seed)
    m = 3
    pm = PalsModel(m, mu_in=2.0, mu_out=0.5, eps_h=0.3, eps_n=1e-2, level=level, heaviside=kind)
    p = np.concatenate([rng.uniform(0.5, 1.5, m), rng.uniform(2.0, 4.0, m),
                        rng.uniform(0.2, 0.8, 2 * m)])
    xy = nodes(13)
    derivs = absorption_jacobians(pm, p, xy)
    for k in range(4 * m):
        dense = np.zeros(len(xy))
        s, v = derivs[k]
        dense[s] = v
        fd = central_difference(lambda q: eval_absorption(pm, q, xy), p, k, 1e-6)
        assert np.allclose(dense, fd, rtol=1e-4, atol=1e-5 * (1 + np.abs(fd).max()))


def test_single_parameter_jacobian_agrees():
    pm = PalsModel(4, eps_h=0.2)
    p = initial_parameters(pm, (0, 1, 0, 1), radius=0.3)
    xy = nodes(11)
    all_ = absorption_jacobians(pm, p, xy)
    for k in range(pm.n_params):
        s, v = absorption_jacobian(pm, p, xy, k)
        assert np.array_equal(s, all_[k][0])
        assert np.allclose(v, all_[k][1], rtol=1e-13, atol=0)


def test_jacobian_support_is_inside_bump():
    pm = PalsModel(2, eps_n=0.0)
    p = np.array([1.0, 1.0, 5.0, 5.0, 0.2, 0.2, 0.8, 0.8])
    xy = nodes(21)
    for k, (s, _) in enumerate(absorption_jacobians(pm, p, xy)):
        c = p[4 + 2 * pm.owner(k): 6 + 2 * pm.owner(k)]
        assert np.all(np.hypot(*(xy[s] - c).T) < 0.2 + 1e-12)


def test_initial_parameters_layout():
    pm = PalsModel(9)
    p = initial_parameters(pm, (0, 2, 0, 1), alpha=0.7, radius=0.2)
    a, b, c = pm.split(p)
    assert np.all(a == 0.7) and np.allclose(b, 5.0)
    assert c[:, 0].min() > 0 and c[:, 0].max() < 2
    assert len({tuple(row) for row in c}) == 9
