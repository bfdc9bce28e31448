import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpsi.viscosity import G, Law, ViscosityModel, check_monotonicity, newtonian, nu_darcy, nu_fluid

CROSS = ViscosityModel(Law.Cross, nu0=10.0, nu_inf=1.0, K=1.0, r=1.35)
CARREAU = ViscosityModel(Law.Carreau, nu0=10.0, nu_inf=1.0, K=1.0, r=1.35)
POWER = ViscosityModel(Law.PowerLaw, K=1.0, r=1.35)


def test_cross_closed_form():
    assert nu_fluid(CROSS, 0.0) == 10.0
    assert nu_fluid(CROSS, 1.0) == 5.5


def test_carreau_closed_form():
    assert nu_fluid(CARREAU, 0.0) == 10.0
    assert abs(nu_fluid(CARREAU, 1.0) - (1 + 9 * 2 ** -0.325)) < 1e-14
    d = np.logspace(-3, 6, 50)
    nu = nu_fluid(CARREAU, d)
    assert np.all(np.diff(nu) < 0) and nu[-1] > 1.0


def test_power_law_scaling():
    d = np.array([0.5, 2.0, 7.0])
    for s in (0.1, 3.0):
        assert np.allclose(nu_fluid(POWER, s * d), s ** (1.35 - 2) * nu_fluid(POWER, d), rtol=1e-14)
    assert np.isinf(nu_fluid(POWER, 0.0))
    assert np.isfinite(nu_fluid(POWER, 0.0, eps=1e-8))


def test_power_law_darcy_uses_permeability():
    m = ViscosityModel(Law.PowerLaw, K=2.0, r=1.5, m_c=3.0)
    u, kappa = 0.7, 0.25
    assert abs(nu_darcy(m, u, kappa) - 2.0 * (u / (0.5 * 3.0)) ** -0.5) < 1e-14
    with pytest.raises(ValueError):
        nu_darcy(m, u, 0.0)


def test_newtonian_constant():
    assert np.all(nu_fluid(newtonian(3.0), np.array([0, 1, 1e9])) == 3.0)


@pytest.mark.parametrize("kw", [dict(law=Law.Cross, nu_inf=11.0), dict(law=Law.Carreau, r=2.0),
                                dict(law=Law.Cross, K=0.0), dict(law=Law.Newtonian, nu0=0.0)])
def test_invalid_parameters(kw):
    with pytest.raises(ValueError):
        ViscosityModel(**kw)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([CROSS, CARREAU]), st.floats(0, 1e4), st.floats(0, 1e4))
def test_bounded_laws_between_limits_and_monotone(model, a, b):
    lo, hi = sorted((a, b))
    n_lo, n_hi = nu_fluid(model, lo), nu_fluid(model, hi)
    assert 1.0 <= n_hi <= n_lo <= 10.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
def test_G_monotone_pairwise(v):
    x, y = np.array([v[:2]]), np.array([v[2:]])
    for m in (CROSS, CARREAU, POWER):
        assert np.einsum("ij,ij", G(m, x) - G(m, y), x - y) >= -1e-9


def test_newtonian_A1_quotient_is_nu0():
    rep = check_monotonicity(newtonian(4.0), n_samples=1000)
    assert abs(rep.min_quotient_A1 - 4.0) < 1e-12 and abs(rep.max_ratio_A2 - 4.0) < 1e-12
    assert rep.holds_A()


def test_bounded_laws_pass_A():
    for m in (CROSS, CARREAU):
        rep = check_monotonicity(m, n_samples=10_000)
        assert rep.min_quotient_A1 > 0 and rep.holds_A()


def test_power_law_passes_B():
    rep = check_monotonicity(POWER, n_samples=10_000, c=0.0)
    assert rep.min_quotient_B1 > 0 and rep.holds_B()


def test_cross_without_floor_fails_A():
    rep = check_monotonicity(ViscosityModel(Law.Cross, nu0=10.0, nu_inf=0.0), n_samples=10_000)
    assert not rep.holds_A()


def test_sample_count_validation():
    with pytest.raises(ValueError):
        check_monotonicity(CROSS, n_samples=0)


def test_check_deterministic():
    assert check_monotonicity(CROSS, 500, rng_seed=3) == check_monotonicity(CROSS, 500, rng_seed=3)
