"""Checks of the identification preconditions.

* :func:`chi2_divergence_curve` measures instrument relevance at each
  treatment value as ``Var[p(a|Z,L) / p(a|L) | L]``.
* :func:`check_urwf` and :func:`kappa_sign_map` inspect the sign and size of
  ``kappa_pi(a, l) = E[pi | A=a, L=l] - E[pi | L=l]`` on an ``(a, l)`` grid.
* :func:`cover_interval` covers a compact treatment range with finitely many
  intervals, each with its own density weighting function.
* :func:`aiv_weight_check` evaluates the AIV weight ``omega`` when the latent
  confounder is known.

The "almost surely" statements behind these checks cannot be verified from
a sample; every verdict is taken on a finite grid and reports its minimum.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Dataset, TargetInterval
from .exceptions import CoverageGapError, MisuseError, NuisanceTrainingError
from .nuisance import (CondDensityModel, NuisanceConfig, WeightingFunction, fit_regression,
                       make_density_rwf)

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 0.05
URWF_EPSILON_SCALE = 0.05


def _write(text, path):
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def l_grid_default(L, per_dim: int = 9, cap: int = 81) -> np.ndarray:
    """Evaluation points for the covariates.

    Distinct rows of ``L`` when there are at most ``cap`` of them, otherwise
    the product of per-coordinate sample quantiles (at most ``cap`` points).
    """
    L = np.asarray(L, dtype=float)
    if L.ndim == 1:
        L = L[:, None]
    d = L.shape[1]
    if d == 0:
        return np.zeros((1, 0))
    uniq = np.unique(L, axis=0)
    if uniq.shape[0] <= cap:
        return uniq
    k = per_dim
    while k > 2 and k ** d > cap:
        k -= 1
    probs = (np.arange(k) + 0.5) / k
    axes = [np.quantile(L[:, j], probs) for j in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.column_stack([m.ravel() for m in mesh])
    return grid[:cap]


def _neighbours(L, l, k):
    """Rows whose covariates equal ``l`` or, if none, the ``k`` nearest rows."""
    if L.shape[1] == 0:
        return np.arange(L.shape[0])
    exact = np.flatnonzero(np.all(L == l, axis=1))
    if exact.size:
        return exact
    scale = np.std(L, axis=0)
    scale[scale == 0] = 1.0
    dist = np.sum(((L - l) / scale) ** 2, axis=1)
    return np.argsort(dist, kind="stable")[:k]


# ---------------------------------------------------------------------------
# relevance
# ---------------------------------------------------------------------------


@dataclass
class RelevanceCurve:
    """Estimated chi-square divergence ``D(a, l)``; axes ``(l, a)``.

    ``density_variance`` holds ``Var[p(a|Z,l) | L=l]``, which equals
    ``p(a|l)^2 D(a, l)``.  ``flags`` marks cells where ``p(a|l)`` fell below the
    density floor.
    """

    a_grid: np.ndarray
    l_grid: np.ndarray
    values: np.ndarray
    density_variance: np.ndarray
    flags: np.ndarray
    threshold: float = DIVERGENCE_THRESHOLD

    @property
    def min(self) -> np.ndarray:
        return np.min(self.values, axis=0)

    @property
    def mean(self) -> np.ndarray:
        return np.mean(self.values, axis=0)

    @property
    def weak(self) -> np.ndarray:
        """Grid points whose minimum divergence over ``l`` is below the threshold."""
        return self.min < self.threshold

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "l", "value", "flag"])
        for i, l in enumerate(self.l_grid):
            label = ";".join(f"{v:.10g}" for v in l)
            for j, a in enumerate(self.a_grid):
                w.writerow([f"{a:.10g}", label, f"{self.values[i, j]:.10g}",
                            int(self.flags[i, j])])
        return _write(buf.getvalue(), path)


def chi2_divergence_curve(data: Dataset, a_grid, l_grid=None,
                          config: NuisanceConfig = NuisanceConfig(),
                          neighbours: Optional[int] = None,
                          threshold: float = DIVERGENCE_THRESHOLD) -> RelevanceCurve:
    """Relevance of the instrument at each ``a`` in ``a_grid``.

    For each ``l`` the conditional law of ``Z`` is represented by the ``Z``
    values of rows with covariates equal (or nearest) to ``l``, and the
    divergence is the variance of ``p_hat(a|Z,l) / p_hat(a|l)`` over them.
    With ``config.density.method == "frequency"`` the densities are empirical
    frequencies and the result is the divergence of the empirical law.
    """
    a_grid = np.atleast_1d(np.asarray(a_grid, dtype=float))
    l_grid = l_grid_default(data.L) if l_grid is None else np.asarray(l_grid, dtype=float)
    if l_grid.ndim == 1:
        l_grid = l_grid.reshape(-1, data.l_dim)
    support = data.treatment_support
    p_zl = CondDensityModel(data.A, np.column_stack([data.Z, data.L]), config.density, support)
    p_l = CondDensityModel(data.A, data.L, config.density, support)
    k = neighbours or max(50, data.n // 10)
    values = np.zeros((l_grid.shape[0], a_grid.size))
    dvar = np.zeros_like(values)
    flags = np.zeros(values.shape, dtype=bool)
    for i, l in enumerate(l_grid):
        rows = _neighbours(data.L, l, k)
        Zs = data.Z[rows]
        X = np.column_stack([Zs, np.repeat(l[None, :], rows.size, axis=0)])
        for j, a in enumerate(a_grid):
            num = p_zl.density(a, X)
            den = float(p_l.density(a, l[None, :])[0])
            if den < config.density_floor:
                flags[i, j] = True
                den = config.density_floor
            values[i, j] = np.var(num / den)
            dvar[i, j] = np.var(num)
    return RelevanceCurve(a_grid, l_grid, values, dvar, flags, threshold)


# ---------------------------------------------------------------------------
# kappa sign structure
# ---------------------------------------------------------------------------


class KappaModel:
    """``kappa_hat(a, l)`` from regressions of ``Z_pi`` on ``(A, L)`` and on ``L``."""

    def __init__(self, data: Dataset, pi: WeightingFunction,
                 config: NuisanceConfig = NuisanceConfig(), zpi=None):
        zpi = pi(data.Z, data.L) if zpi is None else np.asarray(zpi, dtype=float)
        self.zpi_sd = float(np.std(zpi))
        reg = config.regression
        try:
            self.m_model = fit_regression(np.column_stack([data.A, data.L]), zpi, reg, True)
            if data.l_dim == 0 or np.all(np.ptp(data.L, axis=0) == 0):
                mean = float(np.mean(zpi))
                self.rho = lambda L: np.full(np.asarray(L).shape[0], mean)
            else:
                self.rho = fit_regression(data.L, zpi, reg, False).predict
        except Exception as exc:  # noqa: BLE001 - surfaced as a training failure
            raise NuisanceTrainingError(f"fitting kappa failed: {exc}", component="kappa") from exc
        self.l_dim = data.l_dim

    def grid(self, a_grid, l_grid) -> np.ndarray:
        """Values on the product grid, axes ``(l, a)``."""
        a_grid = np.asarray(a_grid, dtype=float)
        l_grid = np.asarray(l_grid, dtype=float).reshape(-1, self.l_dim)
        nl, na = l_grid.shape[0], a_grid.size
        X = np.column_stack([np.tile(a_grid, nl), np.repeat(l_grid, na, axis=0)])
        m = self.m_model.predict(X).reshape(nl, na)
        return m - self.rho(l_grid)[:, None]


@dataclass
class KappaMap:
    a_grid: np.ndarray
    l_grid: np.ndarray
    values: np.ndarray
    crossings: np.ndarray

    @property
    def crossing_per_l(self) -> np.ndarray:
        return self.crossings.any(axis=1)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "l", "value", "flag"])
        for i, l in enumerate(self.l_grid):
            label = ";".join(f"{v:.10g}" for v in l)
            for j, a in enumerate(self.a_grid):
                w.writerow([f"{a:.10g}", label, f"{self.values[i, j]:.10g}",
                            int(self.crossings[i, j])])
        return _write(buf.getvalue(), path)


def _crossings(values) -> np.ndarray:
    """Flag cell ``j`` when ``kappa`` changes sign between grid points ``j`` and ``j+1``."""
    s = np.sign(values)
    flags = np.zeros(values.shape, dtype=bool)
    flags[:, :-1] = s[:, :-1] * s[:, 1:] <= 0
    return flags


def kappa_sign_map(data: Dataset, pi: WeightingFunction, a_grid, l_grid=None,
                   config: NuisanceConfig = NuisanceConfig(),
                   model: Optional[KappaModel] = None) -> KappaMap:
    """``kappa_hat`` on a product grid with zero crossings along ``a`` flagged."""
    a_grid = np.asarray(a_grid, dtype=float)
    l_grid = l_grid_default(data.L) if l_grid is None else np.asarray(l_grid, dtype=float)
    model = model or KappaModel(data, pi, config)
    vals = model.grid(a_grid, l_grid)
    return KappaMap(a_grid, l_grid.reshape(-1, data.l_dim), vals, _crossings(vals))


@dataclass
class UrwfVerdict:
    interval: TargetInterval
    min_abs_kappa: float
    sign_constant: bool
    epsilon: float
    passed: bool
    sign: int
    a_grid: np.ndarray = field(repr=False)
    l_grid: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        return {
            "interval": [self.interval.lo, self.interval.hi],
            "min_abs_kappa": self.min_abs_kappa,
            "sign_constant": self.sign_constant,
            "sign": self.sign,
            "epsilon": self.epsilon,
            "pass": self.passed,
            "a_grid_size": int(self.a_grid.size),
            "l_grid_size": int(self.l_grid.shape[0]),
            **self.meta,
        }

    def to_json(self, path=None) -> str:
        return _write(json.dumps(self.as_record(), indent=2, sort_keys=True) + "\n", path)


def check_urwf(data: Dataset, pi: WeightingFunction, interval: TargetInterval,
               epsilon: Optional[float] = None, a_grid=None, l_grid=None,
               config: NuisanceConfig = NuisanceConfig(),
               model: Optional[KappaModel] = None) -> UrwfVerdict:
    """Is ``pi`` a uniform weighting function on ``interval``?

    Passes when ``kappa_hat`` keeps one sign over the ``(a, l)`` grid and its
    smallest magnitude is at least ``epsilon`` (default ``0.05 sd(Z_pi)``).
    A supplied ``a_grid`` is restricted to ``interval``; by default 41 equally
    spaced points are used.
    """
    model = model or KappaModel(data, pi, config)
    if epsilon is None:
        epsilon = URWF_EPSILON_SCALE * model.zpi_sd
    if a_grid is None:
        a_grid = np.linspace(interval.lo, interval.hi, 41)
    else:
        a_grid = np.asarray(a_grid, dtype=float)
        a_grid = a_grid[(a_grid >= interval.lo) & (a_grid <= interval.hi)]
        if a_grid.size == 0:
            raise ValueError("no grid point falls inside the interval")
    l_grid = l_grid_default(data.L) if l_grid is None else np.asarray(l_grid, dtype=float)
    vals = model.grid(a_grid, l_grid)
    signs = np.sign(vals)
    constant = bool(np.all(signs == signs.flat[0]) and signs.flat[0] != 0)
    min_abs = float(np.min(np.abs(vals)))
    passed = constant and min_abs >= epsilon
    meta = {"max_abs_kappa": float(np.max(np.abs(vals))), "weighting": pi.id,
            "note": "checked on a finite (a, l) grid only"}
    return UrwfVerdict(interval, min_abs, constant, float(epsilon), bool(passed),
                       int(signs.flat[0]), a_grid, l_grid.reshape(-1, data.l_dim), meta)


# ---------------------------------------------------------------------------
# finite covers
# ---------------------------------------------------------------------------


@dataclass
class CoverMember:
    center: float
    radius: float
    pi: WeightingFunction
    verdict: UrwfVerdict

    @property
    def lo(self):
        return self.center - self.radius

    @property
    def hi(self):
        return self.center + self.radius


@dataclass
class CoverPlan:
    compact: tuple
    members: list

    def covers(self) -> bool:
        """Whether the union of the open member intervals contains ``compact``."""
        lo, hi = self.compact
        p = lo
        while True:
            reach = [m.hi for m in self.members if m.lo < p < m.hi]
            if not reach:
                return False
            p = max(reach)
            if p > hi:
                return True

    def to_json(self, path=None) -> str:
        doc = {"compact": list(self.compact),
               "members": [{"center": m.center, "radius": m.radius, "weighting": m.pi.id,
                            "verdict": m.verdict.as_record()} for m in self.members]}
        return _write(json.dumps(doc, indent=2, sort_keys=True) + "\n", path)


def cover_interval(data: Dataset, compact, epsilon: Optional[float] = None,
                   config: NuisanceConfig = NuisanceConfig(), r0: Optional[float] = None,
                   growth: float = 1.5, max_members: int = 50, l_grid=None) -> CoverPlan:
    """Greedy finite cover of ``compact`` by intervals with their own density weighting.

    At each frontier point ``c`` the weighting function ``p_hat(c | z, l)`` is
    fitted and the radius grows by ``growth`` while :func:`check_urwf` passes,
    followed by one bisection between the last pass and the first failure.
    The next member is centred where the current one ends.
    """
    lo, hi = (float(v) for v in compact)
    a_min, a_max = data.treatment_support
    if not (a_min < lo <= hi < a_max):
        raise ValueError("the compact set must lie strictly inside the treatment support")
    r0 = r0 if r0 is not None else 0.02 * (a_max - a_min)
    l_grid = l_grid_default(data.L) if l_grid is None else l_grid
    members = []
    c = lo
    while True:
        if len(members) >= max_members:
            raise CoverageGapError(f"no cover with at most {max_members} members", point=c)
        pi = make_density_rwf(data, c, config)
        model = KappaModel(data, pi, config)
        room = 0.999 * min(c - a_min, a_max - c)

        def verdict(r):
            return check_urwf(data, pi, TargetInterval(c - r, c + r), epsilon,
                              l_grid=l_grid, config=config, model=model)

        r = min(r0, room)
        v = verdict(r)
        tries = 0
        while not v.passed and tries < 3:
            r, tries = r / 2.0, tries + 1
            v = verdict(r)
        if not v.passed:
            raise CoverageGapError(f"no passing radius at a={c:.4g}", point=c)
        best, best_v = r, v
        fail = None
        while best < room:
            r = min(best * growth, room)
            v = verdict(r)
            if not v.passed:
                fail = r
                break
            best, best_v = r, v
            if best > hi - c and best >= r0:
                break
        if fail is not None:
            mid = 0.5 * (best + fail)
            v = verdict(mid)
            if v.passed:
                best, best_v = mid, v
        members.append(CoverMember(c, best, pi, best_v))
        log.info("cover member at %.4g with radius %.4g", c, best)
        if c + best > hi:
            break
        c = c + best
    return CoverPlan((lo, hi), members)


# ---------------------------------------------------------------------------
# AIV weight
# ---------------------------------------------------------------------------


@dataclass
class AivCheck:
    """Bin means of ``omega`` and its largest deviation from one.

    ``bin_means`` estimate ``E[omega | L]`` and should equal one for every
    valid weighting function; ``max_deviation`` measures ``|omega - 1|`` cell
    by cell and is zero exactly when the treatment density is additive.
    """

    a: float
    bins: np.ndarray
    bin_means: np.ndarray
    bin_se: np.ndarray
    max_deviation: float
    exact: bool

    @property
    def identity_holds(self) -> bool:
        tol = np.maximum(3.0 * self.bin_se, 1e-10)
        return bool(np.all(np.abs(self.bin_means - 1.0) <= tol))

    def aiv_holds(self, tol: float = 1e-10) -> bool:
        return bool(self.max_deviation <= tol)


def aiv_weight_check(source, pi, a: float, l_bins: int = 5,
                     omega_fn: Optional[Callable] = None) -> AivCheck:
    """Evaluate ``omega_{a,pi}(U, L)`` for a known data-generating law.

    ``source`` is either a discrete law (exact enumeration, one bin per
    covariate value) or a simulated dataset with stored latent confounders,
    in which case ``omega_fn(U, L)`` supplies ``omega`` from the known model
    and bin means over quantile bins of the first covariate carry Monte Carlo
    standard errors.
    """
    if hasattr(source, "omega") and hasattr(source, "p_u_l"):
        ia = int(np.flatnonzero(np.isclose(source.a_vals, a))[0])
        om = source.omega(pi)[:, :, ia]
        means = np.sum(source.p_u_l * om, axis=1)
        return AivCheck(float(a), source.l_vals.copy(), means, np.zeros_like(means),
                        float(np.max(np.abs(om - 1.0))), True)
    data = source
    if data.latent_u is None:
        raise MisuseError("the AIV weight needs the latent confounder, which this dataset lacks")
    if omega_fn is None:
        raise MisuseError("omega_fn is required for sampled data")
    om = np.asarray(omega_fn(data.latent_u, data.L), dtype=float).ravel()
    if data.l_dim == 0:
        key = np.zeros(data.n)
        edges = np.array([-np.inf, np.inf])
    else:
        key = data.L[:, 0]
        edges = np.quantile(key, np.linspace(0, 1, l_bins + 1))
        edges[0], edges[-1] = -np.inf, np.inf
    which = np.clip(np.searchsorted(edges, key, side="right") - 1, 0, edges.size - 2)
    means, ses, centres = [], [], []
    for b in range(edges.size - 1):
        v = om[which == b]
        centres.append(float(np.median(key[which == b])) if v.size else np.nan)
        means.append(float(np.mean(v)) if v.size else np.nan)
        ses.append(float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else np.nan)
    return AivCheck(float(a), np.array(centres), np.array(means), np.array(ses),
                    float(np.max(np.abs(om - 1.0))), False)
