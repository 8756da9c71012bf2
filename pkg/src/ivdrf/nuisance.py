"""Nuisance learners: regressions, conditional densities, weighting functions.

The nuisance vector for a weighting function ``pi`` bundles

* ``rho(l)      = E[Z_pi | L = l]``
* ``kappa(a, l) = E[Z_pi | A = a, L = l] - rho(l)``
* ``eta(a, l)   = E[Y | A = a, L = l]``
* ``mu(a, l)    = (E[Y Z_pi | A = a, L = l] - eta(a, l) rho(l)) / kappa(a, l)``
* ``delta(a, l) = p_A(a) / p_{A|L}(a | l)``

Every function of ``(a, l)`` can be evaluated pointwise on paired arrays or on
the outer product of treatment values and covariate rows; the score needs the
latter for its integral over the empirical measure.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .core import Dataset, TargetInterval
from .exceptions import (ConditioningError, LowDensityError, MisuseError,
                         NuisanceTrainingError)

log = logging.getLogger(__name__)

_CHUNK = 512


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionConfig:
    """Settings for :func:`fit_regression`.

    ``method`` is ``"spline"`` (penalized tensor B-splines), ``"local_linear"``
    (local linear fit with a Gaussian product kernel) or ``"cell_means"``
    (exact conditional means for discrete covariates).
    """

    method: str = "spline"
    n_basis_a: int = 8
    n_basis_l: int = 4
    degree: int = 3
    penalty: float = 1e-2
    ridge: float = 1e-10
    bandwidth_multiplier: float = 1.0


@dataclass(frozen=True)
class DensityConfig:
    """Settings for :func:`fit_conditional_density` (``"kernel"`` or ``"frequency"``)."""

    method: str = "kernel"
    bandwidth_multiplier: float = 1.0
    reflect: bool = True


@dataclass(frozen=True)
class NuisanceConfig:
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    density: DensityConfig = field(default_factory=DensityConfig)
    kappa_floor: Optional[float] = None
    kappa_floor_scale: float = 0.01
    delta_cap: float = 20.0
    density_floor: float = 1e-4

    @classmethod
    def discrete(cls, **kw) -> "NuisanceConfig":
        """Exact empirical conditional means and frequencies for discrete data."""
        return cls(regression=RegressionConfig(method="cell_means"),
                   density=DensityConfig(method="frequency"), **kw)


# ---------------------------------------------------------------------------
# spline bases
# ---------------------------------------------------------------------------


def _diff_penalty(k, order=2):
    if k <= order:
        return np.zeros((k, k))
    D = np.diff(np.eye(k), order, axis=0)
    return D.T @ D


@dataclass
class SplineBasis:
    """Clamped B-spline basis with equally spaced knots on the training range."""

    lo: float
    hi: float
    n_basis: int
    degree: int = 3

    def __post_init__(self):
        if self.n_basis < self.degree + 1:
            raise ValueError("n_basis must be at least degree + 1")
        inner = np.linspace(self.lo, self.hi, self.n_basis - self.degree + 1)[1:-1]
        self.knots = np.concatenate([[self.lo] * (self.degree + 1), inner,
                                     [self.hi] * (self.degree + 1)])

    def __call__(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float).ravel(), self.lo, self.hi)
        return BSpline.design_matrix(x, self.knots, self.degree).toarray()


class _CovariateBasis:
    """Additive basis ``[1, B^1_2.., B^2_2.., ...]`` over non-constant covariates.

    The first B-spline of each column is dropped; with the intercept it is
    implied by the partition of unity.
    """

    def __init__(self, L, n_basis, degree):
        L = np.asarray(L, dtype=float)
        self.columns = []
        self.bases = []
        for j in range(L.shape[1]):
            lo, hi = L[:, j].min(), L[:, j].max()
            if hi > lo:
                self.columns.append(j)
                self.bases.append(SplineBasis(lo, hi, n_basis, degree))
        self.size = 1 + sum(b.n_basis - 1 for b in self.bases)

    def __call__(self, L) -> np.ndarray:
        L = np.asarray(L, dtype=float)
        if L.ndim == 1:
            L = L.reshape(-1, 1) if L.size else L.reshape(0, 0)
        n = L.shape[0]
        parts = [np.ones((n, 1))]
        for j, b in zip(self.columns, self.bases):
            parts.append(b(L[:, j])[:, 1:])
        return np.hstack(parts)

    def penalty(self):
        P = np.zeros((self.size, self.size))
        pos = 1
        for b in self.bases:
            k = b.n_basis
            D = np.diff(np.eye(k), 2, axis=0)[:, 1:] if k > 2 else np.zeros((0, k - 1))
            P[pos:pos + k - 1, pos:pos + k - 1] = D.T @ D
            pos += k - 1
        return P


def _rowwise_kron(B1, B2):
    return (B1[:, :, None] * B2[:, None, :]).reshape(B1.shape[0], -1)


# ---------------------------------------------------------------------------
# regression models
# ---------------------------------------------------------------------------


class RegressionModel:
    """Fitted predictor of a response from ``X``.

    When ``tensor_first`` is set, column 0 of ``X`` is the treatment and
    :meth:`predict_outer` evaluates the fit on every pair of a treatment value
    and a covariate row.
    """

    method = "abstract"
    tensor_first = False

    def predict(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict_outer(self, a, L) -> np.ndarray:
        a = np.asarray(a, dtype=float).ravel()
        L = np.asarray(L, dtype=float)
        if L.ndim == 1:
            L = L.reshape(-1, 1)
        m, r = a.size, L.shape[0]
        X = np.column_stack([np.repeat(a, r), np.tile(L, (m, 1))])
        return self.predict(X).reshape(m, r)


class SplineRegression(RegressionModel):
    method = "spline"

    def __init__(self, X, y, config: RegressionConfig, tensor_first: bool):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        n = X.shape[0]
        self.tensor_first = tensor_first
        self.config = config
        if tensor_first:
            a = X[:, 0]
            self.a_basis = SplineBasis(a.min(), a.max(), config.n_basis_a, config.degree) \
                if np.ptp(a) > 0 else None
            self.l_basis = _CovariateBasis(X[:, 1:], config.n_basis_l, config.degree)
        else:
            self.a_basis = None
            self.l_basis = _CovariateBasis(X, config.n_basis_l, config.degree)
        B = self.design(X)
        p = B.shape[1]
        ka = self.a_basis.n_basis if self.a_basis is not None else 1
        P = config.penalty * (np.kron(_diff_penalty(ka), np.eye(self.l_basis.size))
                              + np.kron(np.eye(ka), self.l_basis.penalty()))
        ridge = np.full(p, config.ridge)
        if not tensor_first:
            ridge[0] = 0.0  # leave the intercept unshrunk
        G = B.T @ B / n + P + np.diag(ridge)
        rhs = B.T @ y / n
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > 1e14:
            raise ConditioningError(f"penalized normal matrix is singular (condition {cond:.3g})")
        self.coef = linalg.solve(G, rhs, assume_a="pos")
        self.penalty_matrix = P + np.diag(ridge)

    def _a_design(self, a):
        a = np.asarray(a, dtype=float).ravel()
        if self.a_basis is None:
            return np.ones((a.size, 1))
        return self.a_basis(a)

    def design(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not self.tensor_first:
            return self.l_basis(X)
        return _rowwise_kron(self._a_design(X[:, 0]), self.l_basis(X[:, 1:]))

    def predict(self, X) -> np.ndarray:
        return self.design(X) @ self.coef

    def predict_outer(self, a, L) -> np.ndarray:
        if not self.tensor_first:
            raise MisuseError("outer evaluation needs a treatment-first model")
        C = self.coef.reshape(-1, self.l_basis.size)
        return self._a_design(a) @ C @ self.l_basis(L).T


def _rule_of_thumb(X, d=None):
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    d = X.shape[1] if d is None else d
    sd = np.std(X, axis=0, ddof=1)
    q75, q25 = np.percentile(X, [75, 25], axis=0)
    iqr = (q75 - q25) / 1.349
    scale = np.where(iqr > 0, np.minimum(sd, iqr), sd)
    return scale * (4.0 / ((d + 2.0) * n)) ** (1.0 / (d + 4.0))


class LocalLinearRegression(RegressionModel):
    """Local linear fit with a Gaussian product kernel, evaluated lazily."""

    method = "local_linear"

    def __init__(self, X, y, config: RegressionConfig, tensor_first: bool):
        X = np.asarray(X, dtype=float)
        self.tensor_first = tensor_first
        keep = np.ptp(X, axis=0) > 0 if X.shape[1] else np.zeros(0, dtype=bool)
        self.keep = keep
        self.X = X[:, keep]
        self.y = np.asarray(y, dtype=float).ravel()
        self.h = _rule_of_thumb(self.X) * config.bandwidth_multiplier if self.X.shape[1] else np.zeros(0)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)[:, self.keep]
        if self.X.shape[1] == 0:
            return np.full(X.shape[0], self.y.mean())
        out = np.empty(X.shape[0])
        d = self.X.shape[1]
        for start in range(0, X.shape[0], 256):
            q = X[start:start + 256]
            diff = (self.X[None, :, :] - q[:, None, :])  # (m, n, d)
            w = np.exp(-0.5 * np.sum((diff / self.h) ** 2, axis=2))
            D = np.concatenate([np.ones(diff.shape[:2] + (1,)), diff], axis=2)
            G = np.einsum("mn,mni,mnj->mij", w, D, D)
            G[:, 1:, 1:] += 1e-8 * np.eye(d) * G[:, :1, :1]
            rhs = np.einsum("mn,mni,n->mi", w, D, self.y)
            out[start:start + 256] = np.linalg.solve(G, rhs[..., None])[:, 0, 0]
        return out


class CellMeansRegression(RegressionModel):
    """Exact empirical conditional means of the response given discrete ``X``."""

    method = "cell_means"

    def __init__(self, X, y, config=None, tensor_first: bool = False):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        self.tensor_first = tensor_first
        self.dim = X.shape[1]
        keys, inv = np.unique(X, axis=0, return_inverse=True)
        inv = inv.ravel()
        sums = np.bincount(inv, weights=y, minlength=keys.shape[0])
        counts = np.bincount(inv, minlength=keys.shape[0])
        self.table = {tuple(k): s / c for k, s, c in zip(keys, sums, counts)}
        self.mean = y.mean()

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        if self.dim == 0:
            return np.full(X.shape[0], self.mean)
        keys, inv = np.unique(X, axis=0, return_inverse=True)
        try:
            vals = np.array([self.table[tuple(k)] for k in keys])
        except KeyError as exc:
            raise MisuseError(f"no training rows with covariates {exc.args[0]}") from None
        return vals[inv.ravel()]

    def predict_outer(self, a, L) -> np.ndarray:
        # evaluate on distinct treatment values and distinct covariate rows only
        a = np.asarray(a, dtype=float).ravel()
        L = np.asarray(L, dtype=float)
        if L.ndim == 1:
            L = L.reshape(-1, 1)
        ua, ia = np.unique(a, return_inverse=True)
        if L.shape[1]:
            uL, iL = np.unique(L, axis=0, return_inverse=True)
        else:
            uL, iL = L[:1], np.zeros(L.shape[0], dtype=int)
        small = super().predict_outer(ua, uL)
        return small[np.ix_(ia.ravel(), iL.ravel())]


def fit_regression(X, y, config: RegressionConfig = RegressionConfig(),
                   tensor_first: bool = False) -> RegressionModel:
    """Fit ``E[y | X]`` with the method named in ``config``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if config.method == "cell_means":
        return CellMeansRegression(X, y, config, tensor_first)
    if config.method == "spline":
        if tensor_first:
            basis = config.n_basis_a * (1 + (config.n_basis_l - 1) * (X.shape[1] - 1))
        else:
            basis = 1 + (config.n_basis_l - 1) * X.shape[1]
        if X.shape[0] < max(10, 2 * basis):
            raise ValueError(f"spline regression needs at least {max(10, 2 * basis)} rows "
                             f"(got {X.shape[0]})")
        return SplineRegression(X, y, config, tensor_first)
    if config.method == "local_linear":
        return LocalLinearRegression(X, y, config, tensor_first)
    raise ValueError(f"unknown regression method {config.method!r}")


# ---------------------------------------------------------------------------
# conditional densities
# ---------------------------------------------------------------------------


_SQRT2PI = np.sqrt(2.0 * np.pi)


class CondDensityModel:
    """Product-kernel estimate of ``p(a | x)``.

    ``p(a|x) = sum_i K_b(A_i - a) W_c(X_i - x) / sum_i W_c(X_i - x)`` with
    Gaussian kernels; covariate columns that are constant in training are
    ignored.  With ``reflect`` the response kernel is reflected at the ends of
    ``support`` so no mass leaks past them.
    """

    def __init__(self, A, X, config: DensityConfig = DensityConfig(), support=None):
        A = np.asarray(A, dtype=float).ravel()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(A.size, -1) if X.size else np.zeros((A.size, 0))
        if A.size < 50 and config.method == "kernel":
            raise ValueError(f"kernel density needs at least 50 rows (got {A.size})")
        self.method = config.method
        self.support = support
        self.reflect = config.reflect and support is not None
        keep = np.ptp(X, axis=0) > 0 if X.shape[1] else np.zeros(0, dtype=bool)
        self.keep = keep
        self.A = A
        self.X = X[:, keep]
        self.x_dim = X.shape[1]
        if self.method == "kernel":
            d = 1 + self.X.shape[1]
            h = _rule_of_thumb(np.column_stack([A, self.X]), d) * config.bandwidth_multiplier
            self.b = float(h[0])
            self.c = h[1:]
            if self.b <= 0 or np.any(self.c <= 0):
                raise ValueError("degenerate bandwidth")
            self._Xs = self.X / self.c
            self._Xs_sq = np.sum(self._Xs ** 2, axis=1)
        elif self.method == "frequency":
            keys, inv = np.unique(self.X, axis=0, return_inverse=True)
            self._keys = {tuple(k): i for i, k in enumerate(keys)}
            self._inv = inv.ravel()
        else:
            raise ValueError(f"unknown density method {config.method!r}")

    def _weights(self, Xq):
        """Unnormalized covariate kernel weights, shape (m, n)."""
        if self.X.shape[1] == 0:
            return np.ones((Xq.shape[0], self.A.size))
        Qs = Xq / self.c
        d2 = np.sum(Qs ** 2, axis=1)[:, None] + self._Xs_sq[None, :] - 2.0 * Qs @ self._Xs.T
        return np.exp(-0.5 * np.maximum(d2, 0.0))

    def _response_kernel(self, a):
        """``K_b(A_i - a)`` for a column vector ``a``."""
        def g(t):
            return np.exp(-0.5 * (t / self.b) ** 2) / (self.b * _SQRT2PI)

        k = g(self.A[None, :] - a)
        if self.reflect:
            lo, hi = self.support
            k = k + g(2 * lo - self.A[None, :] - a) + g(2 * hi - self.A[None, :] - a)
        return k

    def density(self, a, X) -> np.ndarray:
        """``p(a_j | X_j)`` pointwise; a scalar ``a`` is broadcast."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.x_dim) if self.x_dim else X.reshape(-1, 0)
        m = X.shape[0]
        a = np.broadcast_to(np.asarray(a, dtype=float), (m,)) if m else np.zeros(0)
        Xq = X[:, self.keep]
        if self.method == "frequency":
            return self._frequency(a, Xq)
        out = np.empty(m)
        scalar_a = np.all(a == a[0]) if m else True
        if scalar_a and m:
            k_fixed = self._response_kernel(np.array([[a[0]]]))[0]
        for start in range(0, m, _CHUNK):
            sl = slice(start, start + _CHUNK)
            W = self._weights(Xq[sl])
            den = W.sum(axis=1)
            if np.any(den / self.A.size < 1e-12):
                bad = start + int(np.argmax(den / self.A.size < 1e-12))
                raise LowDensityError(f"query row {bad} lies outside the covariate support")
            if scalar_a:
                num = W @ k_fixed
            else:
                num = np.sum(W * self._response_kernel(a[sl, None]), axis=1)
            out[sl] = num / den
        return out

    @staticmethod
    def _share(group, a):
        """Share of ``group`` equal to each entry of ``a``."""
        vals, counts = np.unique(group, return_counts=True)
        idx = np.minimum(np.searchsorted(vals, a), vals.size - 1)
        return np.where(vals[idx] == a, counts[idx] / group.size, 0.0)

    def _frequency(self, a, Xq):
        if not Xq.shape[1]:
            return self._share(self.A, a)
        out = np.empty(a.size)
        qkeys, qinv = np.unique(Xq, axis=0, return_inverse=True)
        qinv = qinv.ravel()
        for g, key in enumerate(map(tuple, qkeys)):
            if key not in self._keys:
                raise LowDensityError(f"no training rows with covariates {key}")
            sel = qinv == g
            out[sel] = self._share(self.A[self._inv == self._keys[key]], a[sel])
        return out

    def __call__(self, a, X):
        return self.density(a, X)


def fit_conditional_density(A, X, config: DensityConfig = DensityConfig(),
                            support=None) -> CondDensityModel:
    return CondDensityModel(A, X, config, support)


# ---------------------------------------------------------------------------
# weighting functions
# ---------------------------------------------------------------------------


@dataclass
class WeightingFunction:
    """A bounded map ``pi(z, l)``; evaluations are clipped to ``[-bound, bound]``."""

    kind: str
    fn: Callable = field(repr=False)
    bound: float = np.inf
    params: dict = field(default_factory=dict)

    def __call__(self, Z, L) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        L = np.asarray(L, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if L.ndim == 1:
            L = L.reshape(Z.shape[0], -1) if L.size else np.zeros((Z.shape[0], 0))
        out = np.asarray(self.fn(Z, L), dtype=float)
        if not np.all(np.isfinite(out)):
            raise NuisanceTrainingError("weighting function returned non-finite values",
                                        component="pi")
        return np.clip(out, -self.bound, self.bound)

    @property
    def id(self) -> str:
        if self.kind == "raw_coordinate":
            return f"coordinate:{self.params['j']}"
        if self.kind == "polynomial":
            return f"poly:{self.params['j']}:{self.params['degree']}"
        if self.kind == "conditional_density":
            return f"density@{self.params['a0']:g}"
        return self.params.get("name", self.kind)

    @classmethod
    def coordinate(cls, j: int = 0, bound: float = np.inf) -> "WeightingFunction":
        return cls("raw_coordinate", lambda Z, L: Z[:, j], bound, {"j": j})

    @classmethod
    def polynomial(cls, j: int = 0, degree: int = 2, bound: float = np.inf) -> "WeightingFunction":
        return cls("polynomial", lambda Z, L: Z[:, j] ** degree, bound, {"j": j, "degree": degree})

    @classmethod
    def table(cls, mapping: dict, name: str = "table") -> "WeightingFunction":
        """Lookup table keyed by ``tuple(z) + tuple(l)``."""
        def fn(Z, L):
            return np.array([mapping[tuple(z) + tuple(l)] for z, l in zip(Z, L)], dtype=float)

        bound = max(abs(v) for v in mapping.values())
        return cls("custom_table", fn, bound, {"name": name, "mapping": mapping})

    @classmethod
    def function(cls, fn, bound=np.inf, name="custom") -> "WeightingFunction":
        return cls("custom_table", fn, bound, {"name": name})


def make_density_rwf(train: Dataset, a0: float, config: NuisanceConfig = NuisanceConfig()
                     ) -> WeightingFunction:
    """Weighting function ``pi(z, l) = p_hat(a0 | z, l)`` fitted on ``train``."""
    lo, hi = train.treatment_support
    if not lo < a0 < hi:
        raise ValueError(f"a0={a0} must lie strictly inside the treatment support [{lo}, {hi}]")
    X = np.column_stack([train.Z, train.L])
    model = fit_conditional_density(train.A, X, config.density, train.treatment_support)
    z_dim = train.z_dim

    def fn(Z, L):
        return model.density(a0, np.column_stack([Z, L]))

    bound = 1.5 * float(np.max(model.density(a0, X)))
    return WeightingFunction("conditional_density", fn, bound,
                             {"a0": float(a0), "model": model, "z_dim": z_dim})


_SPEC = re.compile(r"^(density@(?P<a0>[-+.\deE]+)|coordinate:(?P<j>\d+)|"
                   r"poly:(?P<pj>\d+):(?P<deg>\d+))$")


def parse_weighting_spec(spec: str, train: Optional[Dataset] = None,
                         config: NuisanceConfig = NuisanceConfig()) -> WeightingFunction:
    """Build a weighting function from ``density@A0``, ``coordinate:J`` or ``poly:J:D``."""
    m = _SPEC.match(spec.strip())
    if not m:
        raise ValueError(f"cannot parse weighting function spec {spec!r}")
    if m.group("a0") is not None:
        if train is None:
            raise ValueError("a density weighting function needs training data")
        return make_density_rwf(train, float(m.group("a0")), config)
    if m.group("j") is not None:
        j = int(m.group("j"))
        bound = 1.5 * float(np.max(np.abs(train.Z[:, j]))) if train is not None else np.inf
        return WeightingFunction.coordinate(j, bound)
    j, deg = int(m.group("pj")), int(m.group("deg"))
    bound = 1.5 * float(np.max(np.abs(train.Z[:, j]) ** deg)) if train is not None else np.inf
    return WeightingFunction.polynomial(j, deg, bound)


# ---------------------------------------------------------------------------
# nuisance vectors
# ---------------------------------------------------------------------------


def _clip_away(x, floor):
    sign = np.where(x < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(x), floor)


@dataclass
class ClipReport:
    kappa_queries: int = 0
    kappa_clipped: int = 0
    delta_queries: int = 0
    delta_capped: int = 0

    def as_record(self):
        return dict(self.__dict__)


class NuisanceVector:
    """The five nuisance functions evaluated pointwise or on outer products.

    Subclasses implement ``_rho``, ``_kappa_raw``, ``_eta``, ``_m_yz`` and
    ``_delta_raw``, plus optionally fast ``*_outer`` versions.  ``mu`` is
    always built from the ratio of the other components unless a subclass
    overrides it.
    """

    def __init__(self, kappa_floor: float = 0.0, delta_cap: float = np.inf,
                 interval: Optional[TargetInterval] = None):
        self.kappa_floor = float(kappa_floor)
        self.delta_cap = float(delta_cap)
        self.interval = interval
        self.report = ClipReport()

    # -- to be provided by subclasses ------------------------------------
    def _rho(self, L):
        raise NotImplementedError

    def _kappa_raw(self, a, L):
        raise NotImplementedError

    def _kappa_raw_outer(self, a, L):
        return _outer(self._kappa_raw, a, L)

    def _eta(self, a, L):
        raise NotImplementedError

    def _eta_outer(self, a, L):
        return _outer(self._eta, a, L)

    def _mu(self, a, L, kappa, eta, rho):
        raise NotImplementedError

    def _delta_raw(self, a, L):
        raise NotImplementedError

    # -- public evaluators ------------------------------------------------
    def rho(self, L):
        return np.asarray(self._rho(_as_rows(L)), dtype=float)

    def _clip(self, kap, a):
        if self.kappa_floor > 0:
            small = np.abs(kap) < self.kappa_floor
            if self.interval is not None:
                in_n = np.broadcast_to(self.interval.contains(a), kap.shape)
                self.report.kappa_queries += int(in_n.sum())
                self.report.kappa_clipped += int((small & in_n).sum())
            else:
                self.report.kappa_queries += kap.size
                self.report.kappa_clipped += int(small.sum())
            kap = _clip_away(kap, self.kappa_floor)
        return kap

    def kappa(self, a, L):
        a = np.asarray(a, dtype=float).ravel()
        return self._clip(np.asarray(self._kappa_raw(a, _as_rows(L)), dtype=float), a)

    def kappa_outer(self, a, L):
        a = np.asarray(a, dtype=float).ravel()
        return self._clip(np.asarray(self._kappa_raw_outer(a, _as_rows(L)), dtype=float),
                          a[:, None])

    def eta(self, a, L):
        return np.asarray(self._eta(np.asarray(a, dtype=float).ravel(), _as_rows(L)), dtype=float)

    def eta_outer(self, a, L):
        return np.asarray(self._eta_outer(np.asarray(a, dtype=float).ravel(), _as_rows(L)),
                          dtype=float)

    def delta(self, a, L):
        d = np.asarray(self._delta_raw(np.asarray(a, dtype=float).ravel(), _as_rows(L)),
                       dtype=float)
        capped = d > self.delta_cap
        self.report.delta_queries += d.size
        self.report.delta_capped += int(capped.sum())
        return np.minimum(d, self.delta_cap)

    def components(self, a, L) -> dict:
        """All five components at paired ``(a_i, L_i)``."""
        a = np.asarray(a, dtype=float).ravel()
        L = _as_rows(L)
        rho = self.rho(L)
        kap = self.kappa(a, L)
        eta = self.eta(a, L)
        mu = self._mu(a, L, kap, eta, rho)
        return {"rho": rho, "kappa": kap, "eta": eta, "mu": mu, "delta": self.delta(a, L)}

    def mu(self, a, L):
        return self.components(a, L)["mu"]

    def outer(self, a, L) -> dict:
        """``rho`` of each row and ``kappa``, ``eta``, ``mu`` on the outer product."""
        a = np.asarray(a, dtype=float).ravel()
        L = _as_rows(L)
        rho = self.rho(L)
        kap = self.kappa_outer(a, L)
        eta = self.eta_outer(a, L)
        mu = self._mu_outer(a, L, kap, eta, rho)
        return {"rho": rho, "kappa": kap, "eta": eta, "mu": mu}

    def _mu_outer(self, a, L, kap, eta, rho):
        raise NotImplementedError


def _as_rows(L):
    L = np.asarray(L, dtype=float)
    if L.ndim == 1:
        L = L.reshape(-1, 1) if L.size else L.reshape(0, 0)
    return L


def _outer(fn, a, L):
    m, r = a.size, L.shape[0]
    return np.asarray(fn(np.repeat(a, r), np.tile(L, (m, 1)))).reshape(m, r)


class FittedNuisance(NuisanceVector):
    """Nuisance vector assembled from fitted regressions and densities."""

    def __init__(self, eta_model, mz_model, myz_model, rho_model, pa_model, pal_model,
                 kappa_floor, delta_cap, density_floor, interval=None):
        super().__init__(kappa_floor, delta_cap, interval)
        self.eta_model = eta_model
        self.mz_model = mz_model
        self.myz_model = myz_model
        self.rho_model = rho_model
        self.pa_model = pa_model
        self.pal_model = pal_model
        self.density_floor = density_floor

    def _rho(self, L):
        return self.rho_model.predict(L)

    def _kappa_raw(self, a, L):
        return self.mz_model.predict(np.column_stack([a, L])) - self.rho_model.predict(L)

    def _kappa_raw_outer(self, a, L):
        return self.mz_model.predict_outer(a, L) - self.rho_model.predict(L)[None, :]

    def _eta(self, a, L):
        return self.eta_model.predict(np.column_stack([a, L]))

    def _eta_outer(self, a, L):
        return self.eta_model.predict_outer(a, L)

    def _mu(self, a, L, kappa, eta, rho):
        return (self.myz_model.predict(np.column_stack([a, L])) - eta * rho) / kappa

    def _mu_outer(self, a, L, kappa, eta, rho):
        return (self.myz_model.predict_outer(a, L) - eta * rho[None, :]) / kappa

    def _delta_raw(self, a, L):
        pa = self.pa_model.density(a, np.zeros((a.size, 0)))
        pal = self.pal_model.density(a, L)
        return pa / np.maximum(pal, self.density_floor)


class FunctionalNuisance(NuisanceVector):
    """Nuisance vector from user-supplied vectorized callables.

    ``rho(L)``; ``kappa``, ``eta``, ``mu``, ``delta`` take paired ``(a, L)``.
    Used for oracle injection and for exact nuisances of discrete laws.
    """

    def __init__(self, rho, kappa, eta, mu, delta, kappa_floor=0.0, delta_cap=np.inf,
                 interval=None, outer=None):
        super().__init__(kappa_floor, delta_cap, interval)
        self._f_rho, self._f_kappa, self._f_eta, self._f_mu, self._f_delta = \
            rho, kappa, eta, mu, delta
        self._f_outer = outer

    def _rho(self, L):
        return self._f_rho(L)

    def _kappa_raw(self, a, L):
        return self._f_kappa(a, L)

    def _eta(self, a, L):
        return self._f_eta(a, L)

    def _mu(self, a, L, kappa, eta, rho):
        return self._f_mu(a, L)

    def _delta_raw(self, a, L):
        return self._f_delta(a, L)

    def outer(self, a, L) -> dict:
        if self._f_outer is None:
            return super().outer(a, L)
        a = np.asarray(a, dtype=float).ravel()
        L = _as_rows(L)
        res = dict(self._f_outer(a, L))
        res["kappa"] = self._clip(np.asarray(res["kappa"], dtype=float), a[:, None])
        res.setdefault("rho", self.rho(L))
        return res

    def _mu_outer(self, a, L, kap, eta, rho):
        return _outer(self._f_mu, a, L)


def train_nuisance(train: Dataset, pi: WeightingFunction,
                   interval: Optional[TargetInterval] = None,
                   config: NuisanceConfig = NuisanceConfig(), zpi=None) -> FittedNuisance:
    """Fit the nuisance vector for ``pi`` on ``train``.

    ``zpi`` may carry precomputed values of ``pi`` on the training rows.
    Raises :class:`NuisanceTrainingError` naming the component that failed.
    """
    if train.n == 0:
        raise NuisanceTrainingError("empty training set")
    zpi = pi(train.Z, train.L) if zpi is None else np.asarray(zpi, dtype=float)
    AL = np.column_stack([train.A, train.L])
    reg = config.regression

    def fit(name, X, y, tensor_first):
        try:
            return fit_regression(X, y, reg, tensor_first)
        except Exception as exc:  # noqa: BLE001 - re-raised with the component name
            raise NuisanceTrainingError(f"fitting {name} failed: {exc}", component=name) from exc

    eta_model = fit("eta", AL, train.Y, True)
    mz_model = fit("kappa", AL, zpi, True)
    myz_model = fit("mu", AL, train.Y * zpi, True)
    if train.l_dim == 0 or config.regression.method == "spline" and np.all(np.ptp(train.L, axis=0) == 0):
        rho_model = _ConstantModel(zpi.mean())
    else:
        rho_model = fit("rho", train.L, zpi, False)
    try:
        pa_model = fit_conditional_density(train.A, np.zeros((train.n, 0)), config.density,
                                           train.treatment_support)
        pal_model = fit_conditional_density(train.A, train.L, config.density,
                                            train.treatment_support)
    except Exception as exc:  # noqa: BLE001
        raise NuisanceTrainingError(f"fitting delta failed: {exc}", component="delta") from exc
    floor = config.kappa_floor
    if floor is None:
        floor = config.kappa_floor_scale * float(np.std(zpi))
    return FittedNuisance(eta_model, mz_model, myz_model, rho_model, pa_model, pal_model,
                          kappa_floor=floor, delta_cap=config.delta_cap,
                          density_floor=config.density_floor, interval=interval)


class _ConstantModel(RegressionModel):
    method = "constant"

    def __init__(self, value):
        self.value = float(value)

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], self.value)


# ---------------------------------------------------------------------------
# degenerate (no covariate) nuisances
# ---------------------------------------------------------------------------


@dataclass
class DegenerateNuisance:
    """``[rho, mu(a), kappa(a), lam(a)]`` for data without covariates."""

    rho: float
    mu: Callable
    kappa: Callable
    lam: Callable


def degenerate_from(alpha: NuisanceVector, rho: Optional[float] = None) -> DegenerateNuisance:
    """View a nuisance vector fitted without covariates as a degenerate one."""
    empty = np.zeros((1, 0))
    rho_val = float(alpha.rho(empty)[0]) if rho is None else float(rho)

    def comp(name):
        def f(a):
            a = np.asarray(a, dtype=float).ravel()
            return alpha.components(a, np.zeros((a.size, 0)))[name]
        return f

    return DegenerateNuisance(rho=rho_val, mu=comp("mu"), kappa=comp("kappa"), lam=comp("eta"))


def with_floor(config: NuisanceConfig, **changes) -> NuisanceConfig:
    return replace(config, **changes)
