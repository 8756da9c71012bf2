import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivdrf.core import Dataset, TargetInterval
from ivdrf.diagnostics import (AivCheck, CoverMember, CoverPlan, KappaModel, _crossings,
                               aiv_weight_check, check_urwf, chi2_divergence_curve,
                               cover_interval, kappa_sign_map, l_grid_default)
from ivdrf.exceptions import CoverageGapError, MisuseError
from ivdrf.nuisance import NuisanceConfig, WeightingFunction, make_density_rwf
from ivdrf.sim.dgp import DgpOracle, DgpSpec, simulate_dgp
from ivdrf.sim.discrete import additive_toy, multiplicative_toy, uniform_toy

Z0 = WeightingFunction.coordinate(0)


def test_l_grid_default():
    L = np.repeat(np.arange(3.0), 5)[:, None]
    assert l_grid_default(L).ravel().tolist() == [0.0, 1.0, 2.0]
    big = np.random.default_rng(0).normal(size=(500, 2))
    g = l_grid_default(big)
    assert g.shape == (81, 2)
    assert l_grid_default(np.zeros((4, 0))).shape == (1, 0)


def test_frequency_divergence_converges_to_the_law():
    law = additive_toy(1, n_z=3)
    data = law.sample(200000, 4)
    curve = chi2_divergence_curve(data, law.a_vals, config=NuisanceConfig.discrete())
    assert np.allclose(curve.values, law.chi2_divergence(), atol=0.01)
    assert np.allclose(curve.density_variance,
                       law.p_a_l() ** 2 * law.chi2_divergence(), atol=0.005)


def test_uniform_law_has_no_relevance():
    law = uniform_toy()
    assert np.allclose(law.chi2_divergence(), 0.0)
    data = law.sample(40000, 1)
    curve = chi2_divergence_curve(data, law.a_vals, config=NuisanceConfig.discrete())
    assert curve.weak.all()
    text = curve.to_csv()
    assert text.splitlines()[0] == "a,l,value,flag"
    assert len(text.splitlines()) == 1 + law.a_vals.size * law.l_vals.size


def test_kernel_divergence_is_larger_where_the_instrument_matters(sim_5000):
    curve = chi2_divergence_curve(sim_5000, [-0.9, 0.0], l_grid=np.array([[0.0]]))
    assert np.all(curve.values >= 0)
    assert curve.values.shape == (1, 2)


def test_crossings_flag_sign_changes():
    vals = np.array([[1.0, 0.5, -0.2, -0.1], [1.0, 2.0, 3.0, 4.0]])
    flags = _crossings(vals)
    assert flags[0].tolist() == [False, True, False, False]
    assert not flags[1].any()


def test_kappa_model_matches_oracle_sign(sim_5000):
    model = KappaModel(sim_5000, Z0)
    oracle = DgpOracle().nuisance("coordinate")
    a = np.linspace(-0.8, 0.8, 9)
    L = np.array([[-0.25], [0.25]])
    est = model.grid(a, L)
    ref = oracle.outer(a, L)["kappa"].T
    assert np.max(np.abs(est - ref)) < 0.1
    kmap = kappa_sign_map(sim_5000, Z0, a, L, model=model)
    assert kmap.values.shape == (2, 9)
    assert kmap.to_csv().count("\n") == 1 + 18


@pytest.fixture(scope="module")
def density_model(request):
    data = simulate_dgp(DgpSpec(5000, 42))
    pi = make_density_rwf(data, 0.5)
    return data, pi, KappaModel(data, pi)


@settings(max_examples=25, deadline=None)
@given(lo=st.floats(0.0, 0.45), width=st.floats(0.02, 0.5), shrink=st.floats(0.0, 1.0))
def test_urwf_margin_is_monotone_in_the_interval(density_model, lo, width, shrink):
    data, pi, model = density_model
    grid = np.linspace(-0.95, 0.95, 191)
    outer = TargetInterval(lo, lo + width)
    inner = TargetInterval(lo + 0.5 * shrink * width, lo + width - 0.5 * shrink * width + 1e-9)
    if not (grid[(grid >= inner.lo) & (grid <= inner.hi)]).size:
        return
    v_out = check_urwf(data, pi, outer, a_grid=grid, model=model)
    v_in = check_urwf(data, pi, inner, a_grid=grid, model=model)
    assert v_in.min_abs_kappa >= v_out.min_abs_kappa
    if v_out.passed:
        assert v_in.passed


def test_urwf_verdict_serialization(density_model, tmp_path):
    data, pi, model = density_model
    v = check_urwf(data, pi, TargetInterval(0.25, 0.75), model=model)
    assert v.passed and v.sign_constant
    doc = json.loads(v.to_json(tmp_path / "u.json"))
    assert doc["pass"] is True and doc["weighting"] == "density@0.5"
    strict = check_urwf(data, pi, TargetInterval(0.25, 0.75), epsilon=10.0, model=model)
    assert not strict.passed and strict.sign_constant


def test_cover_plan_sweep():
    dummy = object()

    def member(c, r):
        return CoverMember(c, r, WeightingFunction.coordinate(0), dummy)

    assert CoverPlan((0.0, 1.0), [member(0.0, 0.6), member(0.6, 0.5)]).covers()
    assert not CoverPlan((0.0, 1.0), [member(0.0, 0.5), member(1.0, 0.5)]).covers()
    assert not CoverPlan((0.0, 1.0), [member(0.3, 0.5)]).covers()


def test_cover_of_a_single_point(density_model):
    data, _, _ = density_model
    plan = cover_interval(data, (0.5, 0.5))
    assert len(plan.members) == 1 and plan.covers()
    assert json.loads(plan.to_json())["members"][0]["weighting"] == "density@0.5"
    with pytest.raises(ValueError):
        cover_interval(data, (-1.0, 0.0))


def test_cover_gap_is_reported():
    rng = np.random.default_rng(1)
    n = 2000
    Z = rng.normal(size=n)
    A = np.clip(rng.uniform(-1, 1, n), -0.99, 0.99)  # the instrument is irrelevant
    data = Dataset(L=rng.uniform(size=n), Z=Z, A=A, Y=A, treatment_support=(-1, 1))
    with pytest.raises(CoverageGapError):
        cover_interval(data, (-0.2, 0.2), epsilon=0.5)


def test_aiv_weight_by_enumeration():
    add = aiv_weight_check(additive_toy(0), lambda Z, L: Z[:, 0], 0.0)
    assert add.exact and add.identity_holds and add.aiv_holds()
    mult = aiv_weight_check(multiplicative_toy(1), lambda Z, L: Z[:, 0], 0.0)
    assert mult.identity_holds and not mult.aiv_holds()


def test_aiv_weight_on_simulated_data(sim_5000):
    oracle = DgpOracle()
    chk = aiv_weight_check(sim_5000, None, 0.3,
                           omega_fn=lambda U, L: oracle.omega(0.3, U, L, "density", 0.5))
    assert not chk.exact and chk.identity_holds and chk.aiv_holds(1e-10)
    no_u = Dataset(L=sim_5000.L, Z=sim_5000.Z, A=sim_5000.A, Y=sim_5000.Y)
    with pytest.raises(MisuseError):
        aiv_weight_check(no_u, None, 0.3, omega_fn=lambda U, L: U)
    with pytest.raises(MisuseError):
        aiv_weight_check(sim_5000, None, 0.3)


def test_aiv_check_tolerance():
    chk = AivCheck(0.0, np.zeros(2), np.array([1.0, 1.2]), np.array([0.01, 0.1]), 0.3, False)
    assert chk.identity_holds
    chk.bin_means = np.array([1.05, 1.0])
    assert not chk.identity_holds
