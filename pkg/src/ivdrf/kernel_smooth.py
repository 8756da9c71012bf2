"""Kernels, local linear kernel regression and localized bandwidth selection.

The local linear fit at ``a`` with bandwidth ``h`` solves a weighted least
squares problem on the basis ``[1, (A_i - a)/h]`` with weights
``K((A_i - a)/h)/h``.  Because the normal matrix is 2x2 the solution is written
in closed form, which keeps fits over many evaluation points vectorized.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from .core import TargetInterval
from .exceptions import (BandwidthSelectionError, InsufficientSupportError,
                         RankDeficiencyError)

log = logging.getLogger(__name__)

LEVERAGE_CEILING = 1.0 - 1e-8
_COND_LIMIT = 1e12
_CHUNK = 512


class Kernel(enum.Enum):
    EPANECHNIKOV = "epanechnikov"
    TRIANGULAR = "triangular"
    UNIFORM = "uniform"

    @classmethod
    def parse(cls, value) -> "Kernel":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())

    def __call__(self, u):
        return kernel_eval(self, u)


def kernel_eval(kernel: Kernel, u):
    """Evaluate ``K(u)``; zero outside ``[-1, 1]``."""
    kernel = Kernel.parse(kernel)
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) <= 1.0
    if kernel is Kernel.EPANECHNIKOV:
        out = 0.75 * np.maximum(1.0 - u * u, 0.0)
    elif kernel is Kernel.TRIANGULAR:
        out = np.maximum(1.0 - np.abs(u), 0.0)
    else:
        out = np.where(inside, 0.5, 0.0)
    out = np.where(inside, out, 0.0)
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=None)
def kernel_constants(kernel: Kernel) -> tuple:
    """``(int K(s)^2 ds, int K(s) s^2 ds)`` by adaptive quadrature."""
    kernel = Kernel.parse(kernel)
    opts = dict(epsabs=1e-13, epsrel=1e-13, limit=200)
    # the triangular kernel has a kink at 0, so integrate each half separately
    k2 = sum(integrate.quad(lambda s: kernel_eval(kernel, s) ** 2, lo, hi, **opts)[0]
             for lo, hi in ((-1.0, 0.0), (0.0, 1.0)))
    ks2 = sum(integrate.quad(lambda s: kernel_eval(kernel, s) * s * s, lo, hi, **opts)[0]
              for lo, hi in ((-1.0, 0.0), (0.0, 1.0)))
    return k2, ks2


def kernel_moments(kernel: Kernel) -> tuple:
    """``(int K, int K s, int K s^2)``; used to check the kernel conditions."""
    kernel = Kernel.parse(kernel)
    opts = dict(epsabs=1e-13, epsrel=1e-13)
    return tuple(
        sum(integrate.quad(lambda s: kernel_eval(kernel, s) * s ** p, lo, hi, **opts)[0]
            for lo, hi in ((-1.0, 0.0), (0.0, 1.0)))
        for p in (0, 1, 2))


def silverman(x) -> float:
    """Classic rule-of-thumb bandwidth ``0.9 min(sd, IQR/1.34) n^(-1/5)``."""
    x = np.asarray(x, dtype=float)
    sd = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    scale = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * scale * x.size ** (-0.2)


def default_h_grid(A, size: int = 20) -> np.ndarray:
    s = silverman(A)
    return np.geomspace(0.25 * s, 4.0 * s, size)


# ---------------------------------------------------------------------------
# local linear fits
# ---------------------------------------------------------------------------


@dataclass
class LlkrFit:
    a: float
    h: float
    intercept: float
    slope: float
    weights: np.ndarray
    effective_n: int
    condition: float = field(default=float("nan"))


def _moment_sums(A, a, h, kernel):
    """Kernel-weighted moments for each row of ``a`` against all of ``A``."""
    u = (A[None, :] - a[:, None]) / h
    k = kernel_eval(kernel, u) / h
    s0 = k.sum(axis=1)
    ku = k * u
    s1 = ku.sum(axis=1)
    s2 = (ku * u).sum(axis=1)
    return u, k, ku, s0, s1, s2


def llkr_fit(A, s, a: float, h: float, kernel=Kernel.EPANECHNIKOV) -> LlkrFit:
    """Local linear fit of ``s`` on ``A`` at ``a``.

    Raises
    ------
    InsufficientSupportError
        fewer than two distinct treatment values receive positive weight.
    RankDeficiencyError
        the 2x2 normal matrix is numerically singular.
    """
    A = np.asarray(A, dtype=float)
    s = np.asarray(s, dtype=float)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    kernel = Kernel.parse(kernel)
    u = (A - a) / h
    k = kernel_eval(kernel, u) / h
    pos = k > 0
    if np.unique(A[pos]).size < 2:
        raise InsufficientSupportError(
            f"fewer than 2 distinct treatment values within (a-h, a+h) at a={a}, h={h}")
    S = np.array([[k.sum(), (k * u).sum()], [(k * u).sum(), (k * u * u).sum()]])
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise RankDeficiencyError(f"singular local normal matrix at a={a}, h={h} "
                                  f"(condition {cond:.3g})", condition=cond)
    det = S[0, 0] * S[1, 1] - S[0, 1] ** 2
    w = k * (S[1, 1] - S[0, 1] * u) / det
    w_slope = k * (S[0, 0] * u - S[0, 1]) / det
    return LlkrFit(a=float(a), h=float(h), intercept=float(w @ s),
                   slope=float(w_slope @ s) / h, weights=w,
                   effective_n=int(np.sum(np.abs(A - a) <= h)), condition=float(cond))


def llkr_weights(A, a_eval, h: float, kernel=Kernel.EPANECHNIKOV):
    """Dense matrix of local linear weights ``w_ni(a, h)`` (rows: ``a_eval``).

    Rows where the fit is not identified are NaN; the boolean mask of valid
    rows is returned alongside.
    """
    A = np.asarray(A, dtype=float)
    a_eval = np.atleast_1d(np.asarray(a_eval, dtype=float))
    kernel = Kernel.parse(kernel)
    u, k, ku, s0, s1, s2 = _moment_sums(A, a_eval, h, kernel)
    det = s0 * s2 - s1 * s1
    npos = (k > 0).sum(axis=1)
    # a single distinct point in the window makes det exactly 0 (up to rounding)
    ok = (npos >= 2) & (det > 1e-12 * np.maximum(s0 * s2, 1e-300))
    with np.errstate(divide="ignore", invalid="ignore"):
        W = (k * s2[:, None] - ku * s1[:, None]) / det[:, None]
    W[~ok] = np.nan
    return W, ok


def llkr_predict(A, s, a_eval, h: float, kernel=Kernel.EPANECHNIKOV):
    """Vectorized local linear predictions; returns ``(values, ok)``."""
    A = np.asarray(A, dtype=float)
    s = np.asarray(s, dtype=float)
    a_eval = np.atleast_1d(np.asarray(a_eval, dtype=float))
    out = np.full(a_eval.shape, np.nan)
    ok = np.zeros(a_eval.shape, dtype=bool)
    for start in range(0, a_eval.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        W, good = llkr_weights(A, a_eval[sl], h, kernel)
        vals = np.where(good, np.nan_to_num(W) @ s, np.nan)
        out[sl] = vals
        ok[sl] = good
    return out, ok


def smoother_matrix(A, h: float, kernel=Kernel.EPANECHNIKOV) -> np.ndarray:
    """Explicit ``n x n`` smoother matrix; row ``i`` holds the weights of the fit at ``A_i``."""
    W, ok = llkr_weights(A, A, h, kernel)
    if not ok.all():
        raise InsufficientSupportError(f"fit not identified at {np.sum(~ok)} sample points")
    return W


def leverage(A, i: int, h: float, kernel=Kernel.EPANECHNIKOV) -> float:
    """Diagonal element ``w_ni(A_i, h)`` of the smoother matrix."""
    A = np.asarray(A, dtype=float)
    fit = llkr_fit(A, np.zeros_like(A), A[i], h, kernel)
    return float(fit.weights[i])


# ---------------------------------------------------------------------------
# bandwidth selection
# ---------------------------------------------------------------------------


@dataclass
class BandwidthSelection:
    h: float
    criterion: str
    h_grid: np.ndarray
    objective: np.ndarray
    excluded: np.ndarray
    failing: list

    def as_record(self) -> dict:
        return {
            "h": self.h,
            "criterion": self.criterion,
            "h_grid": [float(v) for v in self.h_grid],
            "objective": [None if not np.isfinite(v) else float(v) for v in self.objective],
            "excluded_high_leverage": [int(v) for v in self.excluded],
            "failing": [float(v) for v in self.failing],
        }


def _local_fits(A, phi, idx, h, kernel):
    """Fitted values and leverages at ``A[idx]`` using all data."""
    a_eval = A[idx]
    lo, hi = a_eval.min() - h, a_eval.max() + h
    cols = np.flatnonzero((A > lo) & (A < hi))
    fitted = np.empty(idx.size)
    lev = np.empty(idx.size)
    ok = np.empty(idx.size, dtype=bool)
    pos = np.searchsorted(cols, idx)
    for start in range(0, idx.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        W, good = llkr_weights(A[cols], a_eval[sl], h, kernel)
        Wz = np.nan_to_num(W)
        fitted[sl] = Wz @ phi[cols]
        lev[sl] = Wz[np.arange(Wz.shape[0]), pos[sl]]
        ok[sl] = good
    return fitted, lev, ok


# kernel pieces on each side of the evaluation point, as coefficients of
# (1, d/h, (d/h)^2) where d = A_j - a
_PIECES = {
    Kernel.EPANECHNIKOV: ((0.75, 0.0, -0.75), (0.75, 0.0, -0.75)),
    Kernel.TRIANGULAR: ((1.0, 1.0, 0.0), (1.0, -1.0, 0.0)),
    Kernel.UNIFORM: ((0.5, 0.0, 0.0), (0.5, 0.0, 0.0)),
}


def _local_fits_sorted(A, phi, idx, h, kernel):
    """Same output as :func:`_local_fits` in O(n log n) per bandwidth.

    The kernels are polynomial in ``d = A_j - a`` on each side of ``a``, so the
    window sums behind the 2x2 normal equations follow from prefix sums of
    powers of the sorted treatments.  Powers are taken about the centre of
    the evaluation points to limit cancellation.
    """
    order = np.argsort(A, kind="stable")
    As, ps = A[order], phi[order]
    a = A[idx]
    c = 0.5 * (a.min() + a.max())
    x = (As - c) / h
    t = (a - c) / h
    P = np.zeros((5, As.size + 1))
    Q = np.zeros((4, As.size + 1))
    xp = np.ones_like(x)
    for p in range(5):
        np.cumsum(xp, out=P[p, 1:])
        if p < 4:
            np.cumsum(xp * ps, out=Q[p, 1:])
        xp = xp * x
    strict = kernel is not Kernel.UNIFORM
    lo = np.searchsorted(As, a - h, side="right" if strict else "left")
    mid = np.searchsorted(As, a, side="left")
    hi = np.searchsorted(As, a + h, side="left" if strict else "right")
    binom = ((1,), (1, 1), (1, 2, 1), (1, 3, 3, 1), (1, 4, 6, 4, 1))

    def centred(M, deg, i0, i1):
        # sums over the window of (x - t)^p = u^p for p <= deg
        raw = M[:, i1] - M[:, i0]
        out = np.zeros((deg + 1, a.size))
        for p in range(deg + 1):
            for q in range(p + 1):
                out[p] += binom[p][q] * raw[q] * (-t) ** (p - q)
        return out

    s0 = np.zeros(a.size)
    s1 = np.zeros(a.size)
    s2 = np.zeros(a.size)
    T0 = np.zeros(a.size)
    T1 = np.zeros(a.size)
    for (c0, c1, c2), (i0, i1) in zip(_PIECES[kernel], ((lo, mid), (mid, hi))):
        U = centred(P, 4, i0, i1)
        V = centred(Q, 3, i0, i1)
        s0 += c0 * U[0] + c1 * U[1] + c2 * U[2]
        s1 += c0 * U[1] + c1 * U[2] + c2 * U[3]
        s2 += c0 * U[2] + c1 * U[3] + c2 * U[4]
        T0 += c0 * V[0] + c1 * V[1] + c2 * V[2]
        T1 += c0 * V[1] + c1 * V[2] + c2 * V[3]
    s0, s1, s2, T0, T1 = (v / h for v in (s0, s1, s2, T0, T1))
    det = s0 * s2 - s1 * s1
    ok = ((hi - lo) >= 2) & (det > 1e-9 * np.maximum(s0 * s2, 1e-300))
    with np.errstate(divide="ignore", invalid="ignore"):
        fitted = (s2 * T0 - s1 * T1) / det
        lev = kernel_eval(kernel, 0.0) / h * s2 / det
    return fitted, lev, ok


def select_bandwidth(scores, A, interval: TargetInterval, h_grid=None,
                     kernel=Kernel.EPANECHNIKOV, criterion: str = "loocv",
                     exact: bool = False) -> BandwidthSelection:
    """Localized bandwidth selection over ``h_grid``.

    Only observations with ``A_i`` in ``interval`` enter the criterion, but each
    fit uses every observation inside its window.  Ties go to the larger ``h``.
    ``exact=True`` assembles the local weights explicitly instead of using
    prefix sums; both routes give the same objective up to rounding.
    """
    phi = np.asarray(getattr(scores, "values", scores), dtype=float)
    A = np.asarray(A, dtype=float)
    kernel = Kernel.parse(kernel)
    if h_grid is None:
        h_grid = default_h_grid(A)
    h_grid = np.sort(np.asarray(h_grid, dtype=float))
    if h_grid.size == 0 or np.any(h_grid <= 0):
        raise ValueError("h_grid must be nonempty and positive")
    idx = np.flatnonzero(interval.contains(A))
    if idx.size < 2:
        raise BandwidthSelectionError("fewer than 2 observations inside the target interval")
    n = A.size
    obj = np.full(h_grid.size, np.nan)
    excluded = np.zeros(h_grid.size, dtype=np.int64)
    failing = []
    resid_small = None
    for g, h in enumerate(h_grid):
        fits = _local_fits if exact else _local_fits_sorted
        fitted, lev, ok = fits(A, phi, idx, h, kernel)
        if not ok.all():
            failing.append(h)
            continue
        keep = lev < LEVERAGE_CEILING
        excluded[g] = int(np.sum(~keep))
        r = phi[idx] - fitted
        if criterion == "loocv":
            obj[g] = np.sum((r[keep] / (1.0 - lev[keep])) ** 2) / n
        elif criterion == "gcv":
            m = idx.size
            tr = lev.sum()
            obj[g] = np.mean(r ** 2) / (1.0 - tr / m) ** 2 if tr < m else np.inf
        elif criterion == "cp":
            m = idx.size
            if resid_small is None:
                tr0 = lev.sum()
                resid_small = np.sum(r ** 2) / max(m - tr0, 1.0)
            obj[g] = np.mean(r ** 2) + 2.0 * resid_small * lev.sum() / m
        else:
            raise ValueError(f"unknown criterion {criterion!r}")
        if excluded[g]:
            log.info("h=%.4g: %d high-leverage points left out of the %s sum",
                     h, excluded[g], criterion)
    valid = np.isfinite(obj)
    if not valid.any():
        raise BandwidthSelectionError(
            "no bandwidth in the grid gives identified fits at every required point",
            failing=failing)
    best = np.min(obj[valid])
    tol = 1e-12 * (np.var(phi[idx]) + abs(best))
    winners = np.flatnonzero(valid & (obj <= best + tol))
    h = float(h_grid[winners[-1]])
    return BandwidthSelection(h=h, criterion=criterion, h_grid=h_grid, objective=obj,
                              excluded=excluded, failing=failing)


def select_bandwidth_loocv(scores, A, interval: TargetInterval, h_grid=None,
                           kernel=Kernel.EPANECHNIKOV) -> float:
    return select_bandwidth(scores, A, interval, h_grid, kernel, "loocv").h
