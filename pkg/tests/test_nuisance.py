import numpy as np
import pytest
from scipy import integrate, interpolate

from ivdrf.core import Dataset, TargetInterval
from ivdrf.exceptions import LowDensityError, MisuseError, NuisanceTrainingError
from ivdrf.nuisance import (CondDensityModel, DensityConfig, FunctionalNuisance, NuisanceConfig,
                            RegressionConfig, SplineBasis, WeightingFunction, degenerate_from,
                            fit_regression, make_density_rwf, parse_weighting_spec,
                            train_nuisance)
from ivdrf.sim.dgp import DgpOracle, DgpSpec, simulate_dgp
from ivdrf.sim.discrete import additive_toy


def test_spline_basis_partition_of_unity():
    B = SplineBasis(-1.0, 1.0, 7)(np.linspace(-1, 1, 50))
    assert B.shape == (50, 7)
    assert np.allclose(B.sum(axis=1), 1.0)


def test_unpenalized_spline_matches_scipy_least_squares(rng):
    x = rng.uniform(-1, 1, 300)
    y = np.sin(3 * x) + rng.normal(size=300) * 0.2
    cfg = RegressionConfig(n_basis_l=8, penalty=0.0, ridge=0.0)
    model = fit_regression(x[:, None], y, cfg)
    basis = SplineBasis(x.min(), x.max(), 8)
    ref = interpolate.make_lsq_spline(np.sort(x), y[np.argsort(x)], basis.knots, k=3)
    q = np.linspace(x.min(), x.max(), 40)
    assert np.allclose(model.predict(q[:, None]), ref(q), atol=1e-8)


def test_tensor_spline_recovers_smooth_surface(rng):
    n = 4000
    X = rng.uniform(-1, 1, (n, 2))
    f = np.sin(2 * X[:, 0]) + X[:, 0] * X[:, 1]
    model = fit_regression(X, f + rng.normal(size=n) * 0.1, RegressionConfig(), True)
    Xq = rng.uniform(-0.8, 0.8, (200, 2))
    truth = np.sin(2 * Xq[:, 0]) + Xq[:, 0] * Xq[:, 1]
    assert np.sqrt(np.mean((model.predict(Xq) - truth) ** 2)) < 0.05
    a, L = np.array([-0.5, 0.0, 0.5]), Xq[:4, 1:]
    outer = model.predict_outer(a, L)
    assert np.allclose(outer[1], model.predict(np.column_stack([np.zeros(4), L[:, 0]])))


def test_local_linear_reproduces_linear_functions(rng):
    X = rng.uniform(-1, 1, (300, 2))
    y = 1.0 + 2.0 * X[:, 0] - 3.0 * X[:, 1]
    model = fit_regression(X, y, RegressionConfig(method="local_linear"))
    Xq = rng.uniform(-0.5, 0.5, (20, 2))
    assert np.allclose(model.predict(Xq), 1.0 + 2.0 * Xq[:, 0] - 3.0 * Xq[:, 1], atol=1e-6)


def test_cell_means_are_group_averages(rng):
    X = rng.integers(0, 3, (500, 2)).astype(float)
    y = rng.normal(size=500)
    model = fit_regression(X, y, RegressionConfig(method="cell_means"))
    for key in [(0.0, 0.0), (2.0, 1.0)]:
        sel = np.all(X == key, axis=1)
        assert model.predict(np.array([key]))[0] == pytest.approx(y[sel].mean(), abs=1e-14)
    with pytest.raises(MisuseError):
        model.predict(np.array([[5.0, 5.0]]))


def test_regression_input_checks(rng):
    with pytest.raises(ValueError):
        fit_regression(rng.normal(size=(5, 1)), np.zeros(5))
    with pytest.raises(ValueError):
        fit_regression(rng.normal(size=(50, 1)), np.zeros(50), RegressionConfig(method="tree"))


def test_reflected_density_integrates_to_one(rng):
    A = rng.beta(2, 2, 2000) * 2 - 1
    X = rng.normal(size=(2000, 1))
    m = CondDensityModel(A, X, support=(-1.0, 1.0))
    mass = integrate.quad(lambda a: m.density(a, np.array([[0.3]]))[0], -1, 1, limit=200)[0]
    assert mass == pytest.approx(1.0, abs=1e-6)
    marginal = CondDensityModel(A, np.zeros((2000, 0)), support=(-1.0, 1.0))
    assert marginal(0.0, np.zeros((1, 0)))[0] == pytest.approx(0.75 * 2 / 2, rel=0.1)


def test_frequency_density_counts(rng):
    A = rng.integers(0, 3, 400).astype(float)
    X = rng.integers(0, 2, (400, 1)).astype(float)
    m = CondDensityModel(A, X, DensityConfig(method="frequency"))
    got = m.density(np.array([0.0, 2.0]), np.array([[1.0], [0.0]]))
    want = [np.mean(A[X[:, 0] == 1] == 0), np.mean(A[X[:, 0] == 0] == 2)]
    assert np.allclose(got, want, atol=0)
    with pytest.raises(LowDensityError):
        m.density(0.0, np.array([[7.0]]))


def test_kernel_density_rejects_far_covariates(rng):
    m = CondDensityModel(rng.uniform(size=200), rng.normal(size=(200, 1)) * 0.01)
    with pytest.raises(LowDensityError):
        m.density(0.5, np.array([[50.0]]))
    with pytest.raises(ValueError):
        CondDensityModel(np.zeros(10), np.zeros((10, 0)))


def test_weighting_functions():
    Z = np.array([[1.0], [-3.0]])
    L = np.zeros((2, 0))
    pi = WeightingFunction.coordinate(0, bound=2.0)
    assert pi(Z, L).tolist() == [1.0, -2.0]
    assert pi.id == "coordinate:0"
    assert WeightingFunction.polynomial(0, 2).id == "poly:0:2"
    tab = WeightingFunction.table({(1.0,): 0.5, (-3.0,): -0.5})
    assert tab(Z, L).tolist() == [0.5, -0.5]
    bad = WeightingFunction.function(lambda Z, L: np.full(Z.shape[0], np.nan))
    with pytest.raises(NuisanceTrainingError):
        bad(Z, L)


def test_parse_weighting_spec(sim_small):
    assert parse_weighting_spec("coordinate:0", sim_small).id == "coordinate:0"
    assert parse_weighting_spec("poly:0:3").id == "poly:0:3"
    pi = parse_weighting_spec("density@0.5", sim_small)
    assert pi.id == "density@0.5"
    vals = pi(sim_small.Z, sim_small.L)
    assert np.all(vals >= 0) and np.all(vals <= pi.bound)
    for bad in ["density@", "coord:1", "poly:0"]:
        with pytest.raises(ValueError):
            parse_weighting_spec(bad, sim_small)
    with pytest.raises(ValueError):
        make_density_rwf(sim_small, 1.5)


def test_density_weighting_tracks_true_density():
    data = simulate_dgp(DgpSpec(8000, 11))
    pi = make_density_rwf(data, 0.5)
    oracle = DgpOracle()
    Z = np.linspace(-0.75, 0.75, 7)[:, None]
    L = np.zeros((7, 1))
    assert np.max(np.abs(pi(Z, L) - oracle.p_a_given_zl(0.5, Z[:, 0]))) < 0.1


def test_trained_kappa_is_close_to_oracle(sim_5000):
    oracle = DgpOracle()
    pi = oracle.weighting_function("coordinate")
    alpha = train_nuisance(sim_5000, pi)
    ref = oracle.nuisance("coordinate")
    a = np.linspace(-0.6, 0.6, 7)
    L = np.array([[-0.3], [0.0], [0.3]])
    err = np.abs(alpha.kappa_outer(a, L) - ref.outer(a, L)["kappa"])
    assert err.max() < 0.1
    comp = alpha.components(a, np.zeros((7, 1)))
    assert set(comp) == {"rho", "kappa", "eta", "mu", "delta"}
    assert np.all(comp["delta"] > 0)


def test_cell_means_nuisances_converge_on_a_discrete_law():
    law = additive_toy(0)
    data = law.sample(60000, 3)
    pi = WeightingFunction.coordinate(0)
    alpha = train_nuisance(data, pi, config=NuisanceConfig.discrete(kappa_floor=0.0))
    t = law.exact_tables(lambda Z, L: Z[:, 0])
    a = np.repeat(law.a_vals, law.l_vals.size)
    L = np.tile(law.l_vals, law.a_vals.size)[:, None]
    ia = np.repeat(np.arange(law.a_vals.size), law.l_vals.size)
    il = np.tile(np.arange(law.l_vals.size), law.a_vals.size)
    comp = alpha.components(a, L)
    for name in ("kappa", "eta", "delta"):
        assert np.allclose(comp[name], t[name][il, ia], atol=0.05), name
    assert np.allclose(comp["rho"], t["rho"][il], atol=0.02)


def test_kappa_floor_and_clip_report():
    one = lambda a, L: np.ones(np.size(a))
    alpha = FunctionalNuisance(lambda L: np.zeros(L.shape[0]), lambda a, L: 0.001 * one(a, L),
                               one, one, lambda a, L: 50.0 * one(a, L), kappa_floor=0.01,
                               delta_cap=20.0, interval=TargetInterval(0.0, 0.5))
    a = np.array([0.1, 0.2, 0.9])
    kap = alpha.kappa(a, np.zeros((3, 1)))
    assert np.allclose(kap, 0.01)
    assert alpha.report.kappa_queries == 2 and alpha.report.kappa_clipped == 2
    assert np.allclose(alpha.delta(a, np.zeros((3, 1))), 20.0)
    assert alpha.report.delta_capped == 3


def test_degenerate_view_without_covariates(rng):
    n = 3000
    Z = rng.uniform(-1, 1, n)
    A = np.clip(0.5 * Z + 0.3 * rng.normal(size=n), -0.99, 0.99)
    data = Dataset(L=None, Z=Z, A=A, Y=A + rng.normal(size=n) * 0.1, treatment_support=(-1, 1))
    alpha = train_nuisance(data, WeightingFunction.coordinate(0))
    deg = degenerate_from(alpha)
    assert deg.rho == pytest.approx(Z.mean(), abs=1e-12)
    assert deg.kappa(np.array([0.5]))[0] > 0
    assert deg.lam(np.array([0.0]))[0] == pytest.approx(0.0, abs=0.05)
