import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivdrf.core import TargetInterval
from ivdrf.exceptions import BandwidthSelectionError, InsufficientSupportError
from ivdrf.kernel_smooth import (Kernel, kernel_constants, kernel_eval, kernel_moments, leverage,
                                 llkr_fit, llkr_predict, llkr_weights, select_bandwidth,
                                 silverman, smoother_matrix)

# closed forms: int K^2 and int s^2 K
CONSTANTS = {Kernel.EPANECHNIKOV: (3 / 5, 1 / 5), Kernel.TRIANGULAR: (2 / 3, 1 / 6),
             Kernel.UNIFORM: (1 / 2, 1 / 3)}


@pytest.mark.parametrize("kernel", list(Kernel))
def test_kernel_constants_match_closed_forms(kernel):
    k2, ks2 = kernel_constants(kernel)
    assert k2 == pytest.approx(CONSTANTS[kernel][0], abs=1e-12)
    assert ks2 == pytest.approx(CONSTANTS[kernel][1], abs=1e-12)
    m0, m1, _ = kernel_moments(kernel)
    assert m0 == pytest.approx(1.0, abs=1e-12) and abs(m1) < 1e-12


def test_kernel_eval_support_and_parse():
    assert kernel_eval("epanechnikov", 0.0) == 0.75
    assert kernel_eval(Kernel.TRIANGULAR, 1.5) == 0.0
    assert Kernel.parse("UNIFORM") is Kernel.UNIFORM
    assert np.all(Kernel.EPANECHNIKOV(np.array([-2, 2])) == 0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(3, 120), seed=st.integers(0, 10 ** 6), h=st.floats(0.3, 2.0),
       kernel=st.sampled_from(list(Kernel)))
def test_weight_identities(n, seed, h, kernel):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1, 1, n)
    a = rng.uniform(-1, 1, 4)
    W, ok = llkr_weights(A, a, h, kernel)
    if ok.any():
        assert np.allclose(W[ok].sum(axis=1), 1.0, atol=1e-10)
        assert np.allclose(W[ok] @ A, a[ok], atol=1e-10)
        b0, b1 = rng.normal(size=2)
        fit, good = llkr_predict(A, b0 + b1 * A, a, h, kernel)
        assert np.allclose(fit[good], b0 + b1 * a[good], atol=1e-9)
    assert np.all(np.isnan(W[~ok]))


def test_fit_matches_weighted_least_squares(rng):
    A = rng.uniform(-1, 1, 40)
    s = np.sin(3 * A) + rng.normal(size=40) * 0.1
    for a, h in [(0.0, 0.4), (0.5, 0.7), (-0.9, 0.5)]:
        k = kernel_eval(Kernel.EPANECHNIKOV, (A - a) / h)
        X = np.column_stack([np.ones_like(A), (A - a)])
        coef = np.linalg.lstsq(X * np.sqrt(k)[:, None], s * np.sqrt(k), rcond=None)[0]
        fit = llkr_fit(A, s, a, h)
        assert fit.intercept == pytest.approx(coef[0], abs=1e-10)
        assert fit.slope == pytest.approx(coef[1], abs=1e-9)
        assert fit.intercept == pytest.approx(llkr_predict(A, s, a, h)[0][0], abs=1e-12)


def test_smoother_matrix_and_leverage(rng):
    A = np.sort(rng.uniform(-1, 1, 30))
    S = smoother_matrix(A, 0.8)
    assert np.allclose(S.sum(axis=1), 1.0)
    assert leverage(A, 4, 0.8) == pytest.approx(S[4, 4], abs=1e-12)


def test_insufficient_support():
    A = np.array([0.0, 0.0, 1.0])
    with pytest.raises(InsufficientSupportError):
        llkr_fit(A, A, -0.5, 0.6)
    _, ok = llkr_predict(A, A, [-0.5, 0.5], 0.6)
    assert ok.tolist() == [False, True]


def _loocv_oracle(A, phi, idx, h):
    """Brute-force leave-one-out: refit without each point."""
    total = 0.0
    for i in idx:
        keep = np.arange(A.size) != i
        total += (phi[i] - llkr_fit(A[keep], phi[keep], A[i], h).intercept) ** 2
    return total / A.size


def test_loocv_shortcut_equals_refitting(rng):
    A = rng.uniform(-1, 1, 150)
    phi = A ** 2 + rng.normal(size=150) * 0.3
    N = TargetInterval(-0.5, 0.5)
    hs = np.array([0.3, 0.5])
    sel = select_bandwidth(phi, A, N, hs, exact=True)
    idx = np.flatnonzero(N.contains(A))
    for h, obj in zip(hs, sel.objective):
        assert obj == pytest.approx(_loocv_oracle(A, phi, idx, h), rel=1e-10)


@pytest.mark.parametrize("kernel", list(Kernel))
def test_fast_and_exact_selection_agree(kernel, rng):
    A = rng.uniform(-1, 1, 2000)
    phi = np.cos(2 * A) + rng.normal(size=2000)
    N = TargetInterval(0.25, 0.75)
    hs = np.geomspace(0.03, 0.6, 12)
    fast = select_bandwidth(phi, A, N, hs, kernel, exact=False)
    slow = select_bandwidth(phi, A, N, hs, kernel, exact=True)
    assert fast.h == slow.h
    assert np.allclose(fast.objective, slow.objective, rtol=1e-7, equal_nan=True)


def test_selection_prefers_larger_bandwidth_for_linear_truth(rng):
    A = rng.uniform(-1, 1, 1500)
    phi = 2 * A + rng.normal(size=1500)
    sel = select_bandwidth(phi, A, TargetInterval(-0.5, 0.5), np.geomspace(0.05, 0.8, 10))
    assert sel.h >= 0.3
    assert sel.as_record()["h"] == sel.h


def test_selection_errors(rng):
    A = rng.uniform(-1, 1, 50)
    with pytest.raises(BandwidthSelectionError):
        select_bandwidth(A, A, TargetInterval(2.0, 3.0))
    with pytest.raises(ValueError):
        select_bandwidth(A, A, TargetInterval(-0.5, 0.5), [0.0])
    with pytest.raises(ValueError):
        select_bandwidth(A, A, TargetInterval(-0.5, 0.5), [0.3], criterion="aic")


@pytest.mark.parametrize("criterion", ["gcv", "cp"])
def test_other_criteria_run(criterion, rng):
    A = rng.uniform(-1, 1, 400)
    sel = select_bandwidth(np.sin(2 * A) + rng.normal(size=400), A, TargetInterval(-0.5, 0.5),
                           criterion=criterion)
    assert sel.h > 0 and np.isfinite(sel.objective).any()


def test_silverman_rule(rng):
    x = rng.normal(size=10000)
    assert silverman(x) == pytest.approx(0.9 * 10000 ** -0.2, rel=0.05)
