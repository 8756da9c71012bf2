"""Dose-response curves from cross-fitted scores.

Three routes are offered: a local linear smoother of the scores with
pointwise asymptotic intervals, a least-squares natural-spline fit over the
target interval, and a pairs bootstrap that reruns the whole pipeline.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Dataset, TargetInterval, make_rng
from .exceptions import (BootstrapError, ConditioningError, InsufficientSupportError,
                         IvdrfError, RankDeficiencyError)
from .kernel_smooth import (Kernel, kernel_constants, llkr_fit, llkr_predict,
                            select_bandwidth)
from .nuisance import CondDensityModel, DensityConfig

log = logging.getLogger(__name__)

Z975 = 1.959963984540054


@dataclass
class DrfEstimate:
    """Estimated curve on a grid inside the target interval.

    ``sigma`` is the asymptotic scale ``sqrt(int K^2 Var[phi|A=a] / p_A(a))``
    and ``se = sigma / sqrt(n h)`` the standard error of ``theta_hat``.
    """

    grid: np.ndarray
    theta_hat: np.ndarray
    h: Optional[float]
    method: str
    se: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    ci_lo: Optional[np.ndarray] = None
    ci_hi: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    missing: Optional[np.ndarray] = None
    degenerate: Optional[np.ndarray] = None
    boot_sd: Optional[np.ndarray] = None
    boot_lo: Optional[np.ndarray] = None
    boot_hi: Optional[np.ndarray] = None
    errors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.size > 1 and np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if self.missing is None:
            self.missing = ~np.isfinite(self.theta_hat)

    def columns(self) -> dict:
        cols = {"a": self.grid, "theta": self.theta_hat}
        for name in ("se", "ci_lo", "ci_hi", "bias", "boot_sd", "boot_lo", "boot_hi"):
            val = getattr(self, name)
            if val is not None:
                cols[{"ci_lo": "lo", "ci_hi": "hi"}.get(name, name)] = val
        return cols

    def to_csv(self, path):
        cols = self.columns()
        names = list(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for i in range(self.grid.size):
                w.writerow(["" if not np.isfinite(cols[c][i]) else repr(float(cols[c][i]))
                            for c in names])

    def to_json(self, path=None):
        obj = {"method": self.method, "h": self.h, "meta": self.meta,
               "errors": {str(k): v for k, v in self.errors.items()},
               "missing": [bool(m) for m in self.missing],
               **{k: [None if not np.isfinite(x) else float(x) for x in v]
                  for k, v in self.columns().items()}}
        if self.degenerate is not None:
            obj["variance_degenerate"] = [bool(x) for x in self.degenerate]
        if path is not None:
            with open(path, "w") as fh:
                json.dump(obj, fh, indent=2, sort_keys=True)
        return obj


def _values(scores):
    return np.asarray(getattr(scores, "values", scores), dtype=float)


def marginal_density(A, support=None) -> CondDensityModel:
    """Kernel estimate of ``p_A`` (reflected at the support ends when given)."""
    A = np.asarray(A, dtype=float)
    return CondDensityModel(A, np.zeros((A.size, 0)), DensityConfig(), support)


def estimate_variance(a: float, scores, A, h: float, kernel=Kernel.EPANECHNIKOV,
                      p_A_hat=None, theta_hat: Optional[float] = None,
                      fitted: Optional[np.ndarray] = None) -> dict:
    """Pointwise variance, standard error and 95% interval at ``a``.

    ``Var[phi | A = a]`` is the local linear fit of squared residuals, where
    the residuals subtract the curve fitted with bandwidth ``h`` at each
    ``A_i`` (pass ``fitted`` to reuse them).
    """
    phi = _values(scores)
    A = np.asarray(A, dtype=float)
    kernel = Kernel.parse(kernel)
    n = A.size
    if fitted is None:
        fitted = np.full(n, np.nan)
        near = np.abs(A - a) < h
        fitted[near] = llkr_predict(A, phi, A[near], h, kernel)[0]
    near = np.abs(A - a) < h
    use = near & np.isfinite(fitted)
    if theta_hat is None:
        theta_hat = llkr_fit(A, phi, a, h, kernel).intercept
    resid2 = np.where(use, (phi - np.nan_to_num(fitted)) ** 2, 0.0)
    var = llkr_fit(A[use], resid2[use], a, h, kernel).intercept
    degenerate = var <= 0
    var = max(var, 0.0)
    if p_A_hat is None:
        p_A_hat = marginal_density(A)
    if isinstance(p_A_hat, CondDensityModel):
        p_a = float(p_A_hat.density(a, np.zeros((1, 0)))[0])
    else:
        p_a = float(p_A_hat(a))
    int_k2, _ = kernel_constants(kernel)
    sigma = np.sqrt(int_k2 * var / p_a)
    se = sigma / np.sqrt(n * h)
    return {"sigma": sigma, "se": se, "var": var, "p_a": p_a, "degenerate": degenerate,
            "ci": (theta_hat - Z975 * se, theta_hat + Z975 * se)}


def estimate_drf_llkr(scores, A, interval: TargetInterval, grid_size: int = 51, h="auto",
                      kernel=Kernel.EPANECHNIKOV, h_grid=None, criterion: str = "loocv",
                      variance: bool = True, support=None, grid=None) -> DrfEstimate:
    """Local linear smoothing of the scores on an equally spaced grid over ``interval``.

    Grid points where the fit is not identified are reported missing with
    the reason in ``errors``; they are never filled in.
    """
    phi = _values(scores)
    A = np.asarray(A, dtype=float)
    kernel = Kernel.parse(kernel)
    if grid is None:
        if grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        grid = interval.grid(grid_size)
    meta = {"kernel": kernel.value, "criterion": None, "n": int(A.size),
            "interval": [interval.lo, interval.hi]}
    if h == "auto" or h is None:
        sel = select_bandwidth(phi, A, interval, h_grid, kernel, criterion)
        h = sel.h
        meta["criterion"] = criterion
        meta["bandwidth"] = sel.as_record()
    h = float(h)
    theta = np.full(grid.size, np.nan)
    errors = {}
    for j, a in enumerate(grid):
        try:
            theta[j] = llkr_fit(A, phi, a, h, kernel).intercept
        except (InsufficientSupportError, RankDeficiencyError) as exc:
            errors[float(a)] = str(exc)
    est = DrfEstimate(grid, theta, h, "llkr", errors=errors, meta=meta)
    if not variance:
        return est
    pmodel = marginal_density(A, support)
    near = (A > interval.lo - h) & (A < interval.hi + h)
    fitted = np.full(A.size, np.nan)
    fitted[near] = llkr_predict(A, phi, A[near], h, kernel)[0]
    sigma = np.full(grid.size, np.nan)
    se = np.full(grid.size, np.nan)
    degenerate = np.zeros(grid.size, dtype=bool)
    for j, a in enumerate(grid):
        if not np.isfinite(theta[j]):
            continue
        try:
            v = estimate_variance(a, phi, A, h, kernel, pmodel, theta[j], fitted)
        except (InsufficientSupportError, RankDeficiencyError) as exc:
            errors.setdefault(float(a), f"variance: {exc}")
            continue
        sigma[j], se[j], degenerate[j] = v["sigma"], v["se"], v["degenerate"]
    est.sigma, est.se, est.degenerate = sigma, se, degenerate
    est.ci_lo = theta - Z975 * se
    est.ci_hi = theta + Z975 * se
    est.bias = plugin_bias_curve(grid, theta, kernel, h)
    return est


def plugin_bias(a: float, grid, theta_curve, kernel=Kernel.EPANECHNIKOV, h: float = 1.0) -> float:
    """``h^2 / 2 * theta''(a) * int K s^2`` with a central second difference on the grid."""
    grid = np.asarray(grid, dtype=float)
    theta_curve = np.asarray(theta_curve, dtype=float)
    j = int(np.argmin(np.abs(grid - a)))
    if not np.isclose(grid[j], a, rtol=0, atol=1e-12):
        raise ValueError(f"{a} is not a grid point")
    if j == 0 or j == grid.size - 1:
        raise ValueError(f"{a} is too close to the grid boundary for a second difference")
    step_l, step_r = grid[j] - grid[j - 1], grid[j + 1] - grid[j]
    second = 2.0 * (theta_curve[j + 1] * step_l - theta_curve[j] * (step_l + step_r)
                    + theta_curve[j - 1] * step_r) / (step_l * step_r * (step_l + step_r))
    _, int_ks2 = kernel_constants(Kernel.parse(kernel))
    return 0.5 * h * h * second * int_ks2


def plugin_bias_curve(grid, theta_curve, kernel, h) -> np.ndarray:
    out = np.full(len(grid), np.nan)
    for j in range(1, len(grid) - 1):
        out[j] = plugin_bias(grid[j], grid, theta_curve, kernel, h)
    return out


# ---------------------------------------------------------------------------
# natural spline least squares
# ---------------------------------------------------------------------------


def natural_spline_basis(x, knots) -> np.ndarray:
    """Natural cubic spline basis with an intercept: ``len(knots)`` columns."""
    x = np.asarray(x, dtype=float)
    k = np.asarray(knots, dtype=float)
    K = k.size
    cols = [np.ones_like(x), x]

    def d(j):
        return (np.maximum(x - k[j], 0) ** 3 - np.maximum(x - k[-1], 0) ** 3) / (k[-1] - k[j])

    if K > 2:
        last = d(K - 2)
        for j in range(K - 2):
            cols.append(d(j) - last)
    return np.column_stack(cols)


@dataclass
class SplineFit:
    knots: np.ndarray
    coef: np.ndarray
    lo: float
    scale: float

    def __call__(self, a):
        x = (np.asarray(a, dtype=float) - self.lo) / self.scale
        return natural_spline_basis(x, self.knots) @ self.coef


def fit_natural_spline(A, s, df: int) -> SplineFit:
    """Least-squares natural cubic spline with ``df + 1`` knots at quantiles of ``A``."""
    A = np.asarray(A, dtype=float)
    s = np.asarray(s, dtype=float)
    if df < 1:
        raise ValueError("df must be at least 1")
    if A.size < df + 2:
        raise ConditioningError(f"need at least {df + 2} rows for df={df}")
    lo, hi = A.min(), A.max()
    scale = hi - lo if hi > lo else 1.0
    x = (A - lo) / scale
    knots = np.quantile(x, np.linspace(0, 1, df + 1))
    if np.any(np.diff(knots) <= 0):
        raise ConditioningError("repeated spline knots; too few distinct treatment values")
    B = natural_spline_basis(x, knots)
    coef, _, rank, sv = np.linalg.lstsq(B, s, rcond=None)
    if rank < B.shape[1] or sv[-1] / sv[0] < 1e-12:
        raise ConditioningError("natural spline basis is rank deficient")
    return SplineFit(knots, coef, lo, scale)


def estimate_drf_erm(scores, A, interval: TargetInterval, df: int = 3,
                     grid_size: int = 51) -> DrfEstimate:
    """Natural-spline projection of the in-interval scores."""
    phi = _values(scores)
    A = np.asarray(A, dtype=float)
    inside = interval.contains(A)
    fit = fit_natural_spline(A[inside], phi[inside], df)
    grid = interval.grid(grid_size)
    return DrfEstimate(grid, fit(grid), None, "erm_spline",
                       meta={"df": df, "knots": (fit.lo + fit.scale * fit.knots).tolist(),
                             "interval": [interval.lo, interval.hi]})


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


def _replicate(data, b, seed, pipeline):
    idx = make_rng(seed, 5, b).integers(0, data.n, data.n)
    try:
        return np.asarray(pipeline(data.subset(idx), b), dtype=float)
    except (IvdrfError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("bootstrap replicate %d failed: %s", b, exc)
        return None


def default_pipeline(pi, interval: TargetInterval, cfg, method: str = "llkr",
                     h=None, grid_size: int = 51, df: int = 3, seed: int = 0) -> Callable:
    """Cross-fit then smooth; the callable maps ``(data, replicate)`` to a curve."""
    from dataclasses import replace

    from .crossfit import crossfit_scores

    def run(data: Dataset, b: int):
        res = crossfit_scores(data, pi, interval, replace(cfg, seed=seed + b + 1))
        phi = res[cfg.tags[0]]
        if method == "erm":
            return estimate_drf_erm(phi, data.A, interval, df, grid_size).theta_hat
        return estimate_drf_llkr(phi, data.A, interval, grid_size,
                                 h if h is not None else "auto", variance=False).theta_hat

    return run


def bootstrap_drf(data: Dataset, B: int, pipeline: Callable, seed: int = 0,
                  n_jobs: int = 1, max_fail: float = 0.2) -> dict:
    """Pairs bootstrap of a curve-producing ``pipeline(data, replicate)``.

    Returns per-grid-point ``sd`` and 2.5% / 97.5% percentiles plus the
    replicate curves.  More than ``max_fail`` failed replicates is an error.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    if n_jobs != 1:
        from joblib import Parallel, delayed
        curves = Parallel(n_jobs=n_jobs)(
            delayed(_replicate)(data, b, seed, pipeline) for b in range(B))
    else:
        curves = [_replicate(data, b, seed, pipeline) for b in range(B)]
    failed = [b for b, c in enumerate(curves) if c is None]
    if len(failed) > max_fail * B:
        raise BootstrapError(f"{len(failed)} of {B} bootstrap replicates failed")
    good = np.array([c for c in curves if c is not None])
    with np.errstate(invalid="ignore"):
        sd = np.nanstd(good, axis=0, ddof=1)
        lo, hi = np.nanpercentile(good, [2.5, 97.5], axis=0)
    return {"sd": sd, "lo": lo, "hi": hi, "curves": good, "failed": failed, "B": B}
