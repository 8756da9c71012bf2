"""Enumeration oracles shared by the test modules.

Everything here is computed by summing over the finite support of a
``DiscreteLaw`` and never calls the estimators under test, except to
evaluate a score formula at the enumerated cells.
"""

import numpy as np

from ivdrf.nuisance import DegenerateNuisance
from ivdrf.scores import EmpiricalMeasure, compute_scores, multicat_values


def coordinate_pi(Z, L):
    return Z[:, 0]


def population_measure(law, P):
    """The law of ``(Z_pi, L)`` as a weighted empirical measure."""
    e = law.emp_measure()
    return EmpiricalMeasure(np.asarray(P, dtype=float).ravel(), e["L"], e["w"])


def cell_scores(law, tags, pi=coordinate_pi, tables=None):
    """Score values at every ``(l, z, u, a)`` cell with ``Y`` replaced by its mean.

    Every score is affine in ``Y`` given the other entries, so conditional
    expectations over the cells equal those over the full law.
    """
    P = law.pi_table(pi)
    tables = law.exact_tables(P) if tables is None else tables
    alpha = law.nuisance_from_tables(tables)
    c = law.cells()
    zpi = P[c["il"], c["iz"]]
    return compute_scores(tags, c["A"], c["L"], c["Y"], zpi, alpha, population_measure(law, P))


def conditional_bias(law, values):
    """``E[values | A = a] - theta(a)`` for every support point of ``A``."""
    return np.array([law.expect_given_a(values, a) - law.theta_at(a) for a in law.a_vals])


def degenerate_cell_scores(law, pi=coordinate_pi):
    """Degenerate score at every cell of a law with a single covariate level."""
    assert law.l_vals.size == 1
    P = law.pi_table(pi)
    t = law.exact_tables(P)
    ia = {float(a): j for j, a in enumerate(law.a_vals)}

    def row(name):
        return lambda a: np.array([t[name][0, ia[float(x)]] for x in np.ravel(a)])

    alpha = DegenerateNuisance(rho=float(t["rho"][0]), mu=row("mu"), kappa=row("kappa"),
                               lam=row("eta"))
    c = law.cells()
    from ivdrf.scores import degenerate_values
    return degenerate_values(c["A"], c["Y"], P[c["il"], c["iz"]], alpha, float(t["rho"][0]))


def multicat_mean(law, a_target, pi=coordinate_pi):
    """``E[phi_multicat]`` over the law for treatment level ``a_target``."""
    P = law.pi_table(pi)
    t = law.exact_tables(P)
    alpha = law.nuisance_from_tables(t)
    il = {float(v): i for i, v in enumerate(law.l_vals)}
    ia = {float(v): j for j, v in enumerate(law.a_vals)}

    def Delta(a, L):
        return np.array([t["p_a_l"][il[float(l)], ia[float(x)]] for x, l in zip(a, L[:, 0])])

    c = law.cells()
    vals = multicat_values(c["A"], c["L"], c["Y"], P[c["il"], c["iz"]], alpha, a_target, Delta)
    return float(np.sum(c["w"] * vals) / np.sum(c["w"]))


def perturbed_tables(law, pi, eps: dict, seed: int = 0):
    """Exact tables with ``tables[k] += eps[k] * g_k`` for fixed random directions ``g_k``."""
    P = law.pi_table(pi)
    t = dict(law.exact_tables(P))
    rng = np.random.default_rng(seed)
    dirs = {k: rng.normal(size=np.shape(t[k])) for k in ("rho", "kappa", "eta", "mu", "delta")}
    for k, e in eps.items():
        t[k] = t[k] + e * dirs[k]
    return t
