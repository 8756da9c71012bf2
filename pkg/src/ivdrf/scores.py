"""Per-observation scores for the IV and no-unmeasured-confounding frameworks.

All scores are computed in vectorized form from a nuisance vector and an
empirical measure of ``(Z_pi, L)`` rows.  The IV AIPW score is::

    phi = delta(A,L) (Z_pi - rho(L)) / kappa(A,L) * (Y - mu(A,L))
          + sum_j w_j [mu(A,l_j) - (zpi_j - rho(l_j)) (eta(A,l_j) - mu(A,l_j)) / kappa(A,l_j)]

and its conditional mean given ``A = a`` identifies ``theta(a)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Dataset, Observation, TargetInterval, make_rng
from .exceptions import MisuseError, PropensityError
from .nuisance import DegenerateNuisance, NuisanceVector, WeightingFunction

TAGS = ("aipw_iv", "ipw_iv", "or_iv", "aipw_nuc", "ipw_nuc", "or_nuc",
        "degenerate_iv", "multicat_iv")

_OUTER_CELLS = 1 << 21


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted rows ``(z_pi, l)`` standing in for the law of the observed data."""

    zpi: np.ndarray
    L: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        zpi = np.asarray(self.zpi, dtype=float).ravel()
        L = np.asarray(self.L, dtype=float)
        if L.ndim == 1:
            L = L.reshape(zpi.size, -1) if L.size else np.zeros((zpi.size, 0))
        if zpi.size == 0:
            raise MisuseError("empirical measure is empty")
        w = np.full(zpi.size, 1.0 / zpi.size) if self.weights is None \
            else np.asarray(self.weights, dtype=float).ravel() / np.sum(self.weights)
        object.__setattr__(self, "zpi", zpi)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.zpi.size

    @classmethod
    def from_dataset(cls, data: Dataset, pi: WeightingFunction, rows=None,
                     cap: Optional[int] = None, seed: int = 0) -> "EmpiricalMeasure":
        """Rows of ``data`` (optionally a seeded subsample of at most ``cap`` rows)."""
        rows = np.arange(data.n) if rows is None else np.asarray(rows)
        if cap is not None and rows.size > cap:
            rows = np.sort(make_rng(seed, 3).choice(rows, size=cap, replace=False))
        return cls(pi(data.Z[rows], data.L[rows]), data.L[rows])


@dataclass
class ScoreVector:
    values: np.ndarray
    tag: str
    fold: Optional[np.ndarray] = None
    pi_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.tag not in TAGS:
            raise ValueError(f"unknown score tag {self.tag!r}")
        if not np.all(np.isfinite(self.values)):
            raise MisuseError(f"{self.tag} scores contain non-finite values")
        if self.fold is None:
            self.fold = np.zeros(self.values.size, dtype=int)

    def __len__(self):
        return self.values.size

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "fold", "tag", "pi", "value"])
            for i, (k, v) in enumerate(zip(self.fold, self.values)):
                w.writerow([i, int(k), self.tag, self.pi_id, repr(float(v))])


# ---------------------------------------------------------------------------
# vectorized scores
# ---------------------------------------------------------------------------


def _chunks(m, r):
    step = max(1, _OUTER_CELLS // max(r, 1))
    for start in range(0, m, step):
        yield slice(start, min(m, start + step))


def _integrals(alpha: NuisanceVector, A, emp: EmpiricalMeasure, kinds) -> dict:
    """``sum_j w_j g(A_i, l_j)`` for each ``A_i`` and each requested integrand."""
    out = {k: np.empty(A.size) for k in kinds}
    for sl in _chunks(A.size, emp.size):
        o = alpha.outer(A[sl], emp.L)
        for kind in kinds:
            if kind == "aipw_iv":
                centred = emp.zpi - o["rho"]
                g = o["mu"] - centred[None, :] * (o["eta"] - o["mu"]) / o["kappa"]
            elif kind == "or_iv":
                g = o["mu"]
            elif kind == "nuc":
                g = o["eta"]
            else:
                raise ValueError(kind)
            out[kind][sl] = g @ emp.weights
    return out


def _integral(alpha, A, emp, kind):
    return _integrals(alpha, A, emp, (kind,))[kind]


def aipw_values(A, L, Y, zpi, alpha: NuisanceVector, emp: EmpiricalMeasure) -> np.ndarray:
    A = np.asarray(A, dtype=float).ravel()
    c = alpha.components(A, L)
    first = c["delta"] * (zpi - c["rho"]) / c["kappa"] * (np.asarray(Y, dtype=float) - c["mu"])
    return first + _integral(alpha, A, emp, "aipw_iv")


def ipw_values(A, L, Y, zpi, alpha: NuisanceVector) -> np.ndarray:
    c = alpha.components(np.asarray(A, dtype=float).ravel(), L)
    return c["delta"] * (zpi - c["rho"]) * np.asarray(Y, dtype=float) / c["kappa"]


def or_values(A, alpha: NuisanceVector, emp: EmpiricalMeasure) -> np.ndarray:
    return _integral(alpha, np.asarray(A, dtype=float).ravel(), emp, "or_iv")


def nuc_values(A, L, Y, alpha: NuisanceVector, emp: EmpiricalMeasure) -> dict:
    """``aipw_nuc``, ``ipw_nuc`` and ``or_nuc`` from the ``eta`` and ``delta`` components."""
    A = np.asarray(A, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float)
    eta = alpha.eta(A, L)
    delta = alpha.delta(A, L)
    integral = _integral(alpha, A, emp, "nuc")
    return {"aipw_nuc": delta * (Y - eta) + integral, "ipw_nuc": delta * Y,
            "or_nuc": integral}


def degenerate_values(A, Y, zpi, alpha: DegenerateNuisance, emp_zpi_mean: float,
                      L=None) -> np.ndarray:
    """Score for data without covariates; ``emp_zpi_mean`` is the empirical mean of ``Z_pi``."""
    if L is not None and np.asarray(L).ndim == 2 and np.asarray(L).shape[1] > 0:
        raise MisuseError("the degenerate score applies only to data without covariates")
    A = np.asarray(A, dtype=float).ravel()
    mu = alpha.mu(A)
    kap = alpha.kappa(A)
    lam = alpha.lam(A)
    return ((zpi - alpha.rho) * (np.asarray(Y, dtype=float) - mu) / kap + mu
            - (emp_zpi_mean - alpha.rho) * (lam - mu) / kap)


def multicat_values(A, L, Y, zpi, alpha: NuisanceVector, a_target: float,
                    Delta: Callable, floor: float = 1e-6) -> np.ndarray:
    """Per-row score for a categorical treatment at level ``a_target``.

    The estimand term is left out, so the sample mean estimates ``E[Y(a_target)]``.
    """
    A = np.asarray(A, dtype=float).ravel()
    L = np.asarray(L, dtype=float)
    Y = np.asarray(Y, dtype=float)
    at = np.full(A.size, float(a_target))
    dl = np.asarray(Delta(at, L), dtype=float)
    if np.any(dl < floor):
        raise PropensityError(f"P(A={a_target}|L) falls below {floor}")
    c = alpha.components(at, L)
    centred = zpi - c["rho"]
    hit = A == a_target
    first = np.where(hit, centred / c["kappa"] * (Y - c["mu"]) / dl, 0.0)
    return first + c["mu"] - centred * (c["eta"] - c["mu"]) / c["kappa"]


def compute_scores(tags, A, L, Y, zpi, alpha: NuisanceVector, emp: EmpiricalMeasure,
                   degenerate: Optional[DegenerateNuisance] = None,
                   multicat: Optional[dict] = None) -> dict:
    """Values for every requested tag, reusing shared nuisance evaluations."""
    out = {}
    tags = list(tags)
    A = np.asarray(A, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float)
    kinds = [k for k, need in (("aipw_iv", "aipw_iv" in tags), ("or_iv", "or_iv" in tags),
                               ("nuc", any(t in tags for t in ("aipw_nuc", "or_nuc"))))
             if need]
    integ = _integrals(alpha, A, emp, kinds) if kinds else {}
    if any(t in tags for t in ("aipw_iv", "ipw_iv")):
        c = alpha.components(A, L)
        weight = c["delta"] * (zpi - c["rho"]) / c["kappa"]
    if any(t in tags for t in ("aipw_nuc", "ipw_nuc")):
        eta, delta = alpha.eta(A, L), alpha.delta(A, L)
    for t in tags:
        if t == "aipw_iv":
            out[t] = weight * (Y - c["mu"]) + integ["aipw_iv"]
        elif t == "ipw_iv":
            out[t] = weight * Y
        elif t == "or_iv":
            out[t] = integ["or_iv"]
        elif t == "aipw_nuc":
            out[t] = delta * (Y - eta) + integ["nuc"]
        elif t == "ipw_nuc":
            out[t] = delta * Y
        elif t == "or_nuc":
            out[t] = integ["nuc"]
        elif t == "degenerate_iv":
            if degenerate is None:
                raise MisuseError("degenerate score requested without degenerate nuisances")
            out[t] = degenerate_values(A, Y, zpi, degenerate, float(emp.zpi @ emp.weights), L)
        elif t == "multicat_iv":
            if multicat is None:
                raise MisuseError("multi-categorical score needs a_target and Delta")
            out[t] = multicat_values(A, L, Y, zpi, alpha, **multicat)
        elif t not in out:
            raise ValueError(f"unknown score tag {t!r}")
    return out


# ---------------------------------------------------------------------------
# single-observation wrappers
# ---------------------------------------------------------------------------


def _one(o: Observation, pi: Optional[WeightingFunction], zpi: Optional[float]):
    L = o.l.reshape(1, -1)
    if zpi is None:
        zpi = float(pi(o.z.reshape(1, -1), L)[0])
    return np.array([o.a]), L, np.array([o.y]), np.array([zpi])


def aipw_score(o: Observation, alpha: NuisanceVector, emp: EmpiricalMeasure,
               pi: Optional[WeightingFunction] = None, zpi: Optional[float] = None) -> float:
    A, L, Y, z = _one(o, pi, zpi)
    return float(aipw_values(A, L, Y, z, alpha, emp)[0])


def ipw_score(o: Observation, alpha: NuisanceVector, pi=None, zpi=None) -> float:
    A, L, Y, z = _one(o, pi, zpi)
    return float(ipw_values(A, L, Y, z, alpha)[0])


def or_score(o: Observation, alpha: NuisanceVector, emp: EmpiricalMeasure) -> float:
    return float(or_values(np.array([o.a]), alpha, emp)[0])


def nuc_scores(o: Observation, alpha: NuisanceVector, emp: EmpiricalMeasure) -> tuple:
    vals = nuc_values(np.array([o.a]), o.l.reshape(1, -1), np.array([o.y]), alpha, emp)
    return float(vals["aipw_nuc"][0]), float(vals["ipw_nuc"][0]), float(vals["or_nuc"][0])


def degenerate_score(o: Observation, alpha: DegenerateNuisance, emp: EmpiricalMeasure,
                     pi=None, zpi=None) -> float:
    if o.l.size:
        raise MisuseError("the degenerate score applies only to data without covariates")
    A, L, Y, z = _one(o, pi, zpi)
    return float(degenerate_values(A, Y, z, alpha, float(emp.zpi @ emp.weights))[0])


def multicat_score(o: Observation, alpha: NuisanceVector, a_target: float, Delta: Callable,
                   pi=None, zpi=None) -> float:
    A, L, Y, z = _one(o, pi, zpi)
    return float(multicat_values(A, L, Y, z, alpha, a_target, Delta)[0])


# ---------------------------------------------------------------------------
# averages
# ---------------------------------------------------------------------------


def estimate_psi_q(scores, A, q: Callable, interval: Optional[TargetInterval] = None) -> float:
    """``mean_i q(A_i) phi_i``.

    With ``interval`` given, ``q`` must vanish at every treatment outside it.
    """
    values = scores.values if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=float)
    A = np.asarray(A, dtype=float)
    qa = np.asarray(q(A), dtype=float)
    if interval is not None and np.any(qa[~interval.contains(A)] != 0):
        raise MisuseError("q must be supported inside the validated interval")
    return float(np.mean(qa * values))


def localized_q(A, interval: TargetInterval) -> Callable:
    """``q(a) = 1{a in N} / Pr_hat(A in N)``."""
    share = float(np.mean(interval.contains(A)))
    if share == 0:
        raise MisuseError("no treatments inside the interval")
    return lambda a: interval.contains(a) / share
