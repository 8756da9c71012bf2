"""Cross-fitted score vectors.

The plain scheme trains nuisances on one half of the out-of-fold rows and
uses the other half as the empirical measure in the score's integral term.
The nested scheme trains on all out-of-fold rows and splits each fold into
inner parts, each scored against the measure of the other parts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (Dataset, FoldPlan, NestedFoldPlan, TargetInterval, make_folds,
                   make_nested_folds, make_rng)
from .exceptions import FoldError, IvdrfError, NuisanceTrainingError, PlanError
from .nuisance import (CondDensityModel, DensityConfig, NuisanceConfig, WeightingFunction,
                       degenerate_from, parse_weighting_spec, train_nuisance)
from .scores import TAGS, EmpiricalMeasure, ScoreVector, compute_scores

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CrossfitConfig:
    """Settings for :func:`crossfit_scores`.

    ``nuisance_factory(train, pi, interval, fold)`` replaces nuisance
    training, which is how exact nuisances are injected in tests.
    ``emp_cap`` bounds the size of the empirical measure per fold.
    """

    K: int = 5
    subsplit_fraction: float = 0.5
    nested: bool = False
    J: int = 2
    tags: tuple = ("aipw_iv",)
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    seed: int = 0
    nuisance_factory: Optional[Callable] = None
    emp_cap: Optional[int] = None
    n_jobs: int = 1
    multicat: Optional[dict] = None

    def __post_init__(self):
        if self.K < 2:
            raise PlanError("K must be at least 2")
        if self.nested and self.J < 2:
            raise PlanError("nested cross-fitting needs J >= 2")
        bad = [t for t in self.tags if t not in TAGS]
        if bad:
            raise ValueError(f"unknown score tags {bad}")


@dataclass
class CrossfitResult:
    scores: dict
    plan: object
    fold_reports: list

    def __getitem__(self, tag) -> ScoreVector:
        return self.scores[tag]


def _score_block(data: Dataset, zpi_all, alpha, rows, emp_rows, cfg: CrossfitConfig, k: int,
                 train: Dataset):
    emp_rows = np.asarray(emp_rows)
    if cfg.emp_cap is not None and emp_rows.size > cfg.emp_cap:
        emp_rows = np.sort(make_rng(cfg.seed, 3, k).choice(emp_rows, cfg.emp_cap, replace=False))
    emp = EmpiricalMeasure(zpi_all[emp_rows], data.L[emp_rows])
    A, L, Y = data.A[rows], data.L[rows], data.Y[rows]
    zpi = zpi_all[rows]
    degenerate = degenerate_from(alpha) if "degenerate_iv" in cfg.tags else None
    multicat = None
    if "multicat_iv" in cfg.tags:
        multicat = dict(cfg.multicat or {})
        if "Delta" not in multicat:
            model = CondDensityModel(train.A, train.L, DensityConfig(method="frequency"))
            multicat["Delta"] = model.density
    return compute_scores(cfg.tags, A, L, Y, zpi, alpha, emp, degenerate, multicat)


def _train(train, pi, interval, cfg: CrossfitConfig, k, zpi):
    if cfg.nuisance_factory is not None:
        return cfg.nuisance_factory(train, pi, interval, k)
    return train_nuisance(train, pi, interval, cfg.nuisance, zpi=zpi)


def _run_fold(data, pi, zpi_all, interval, cfg: CrossfitConfig, plan, k):
    try:
        train_rows = plan.train_rows(k)
        train = data.subset(train_rows)
        alpha = _train(train, pi, interval, cfg, k, zpi_all[train_rows])
        if cfg.nested:
            blocks = [(plan.part_rows(k, j), plan.emp_rows(k, j)) for j in range(plan.J)]
        else:
            blocks = [(plan.fold_rows(k), plan.emp_rows(k))]
        out = []
        for rows, emp_rows in blocks:
            out.append((rows, _score_block(data, zpi_all, alpha, rows, emp_rows, cfg, k, train)))
    except NuisanceTrainingError as exc:
        raise FoldError(f"fold {k}: {exc}", fold=k, component=exc.component) from exc
    except IvdrfError:
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced with the fold index
        raise FoldError(f"fold {k}: {exc}", fold=k) from exc
    report = {"fold": k, "n_train": train.n, **alpha.report.as_record()}
    log.info("fold finished", extra={"fold_report": report})
    return out, report


def crossfit_scores(data: Dataset, pi: WeightingFunction, interval: Optional[TargetInterval],
                    cfg: CrossfitConfig = CrossfitConfig()) -> CrossfitResult:
    """Score every row once per requested tag with cross-fitted nuisances."""
    if cfg.nested:
        plan = make_nested_folds(data.n, cfg.K, cfg.J, seed=cfg.seed)
    else:
        plan = make_folds(data.n, cfg.K, cfg.subsplit_fraction, seed=cfg.seed)
    zpi_all = pi(data.Z, data.L)
    if cfg.n_jobs != 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_run_fold)(data, pi, zpi_all, interval, cfg, plan, k) for k in range(cfg.K))
    else:
        results = [_run_fold(data, pi, zpi_all, interval, cfg, plan, k) for k in range(cfg.K)]
    values = {t: np.full(data.n, np.nan) for t in cfg.tags}
    fold = np.full(data.n, -1, dtype=int)
    reports = []
    for k, (blocks, report) in enumerate(results):
        reports.append(report)
        for rows, vals in blocks:
            fold[rows] = k
            for t in cfg.tags:
                values[t][rows] = vals[t]
    if np.any(fold < 0):
        raise PlanError("some rows were not scored")
    scores = {t: ScoreVector(values[t], t, fold.copy(), pi.id) for t in cfg.tags}
    return CrossfitResult(scores, plan, reports)


def nested_crossfit_scores(data: Dataset, pi: WeightingFunction,
                           interval: Optional[TargetInterval],
                           cfg: CrossfitConfig = CrossfitConfig(nested=True)) -> CrossfitResult:
    if not cfg.nested:
        from dataclasses import replace
        cfg = replace(cfg, nested=True)
    return crossfit_scores(data, pi, interval, cfg)


def fit_weighting(data: Dataset, spec: str, config: NuisanceConfig = NuisanceConfig(),
                  holdout: float = 0.2, seed: int = 0,
                  auxiliary: Optional[Dataset] = None):
    """Build the weighting function named by ``spec`` and return it with the rows left to score.

    A density weighting function is fitted on ``auxiliary`` when given,
    otherwise on a seeded ``holdout`` share of ``data`` that is then removed.
    """
    if not spec.startswith("density@"):
        return parse_weighting_spec(spec, data, config), data
    if auxiliary is not None:
        return parse_weighting_spec(spec, auxiliary, config), data
    if not 0 < holdout < 1:
        raise ValueError("holdout must lie in (0, 1)")
    perm = make_rng(seed, 4).permutation(data.n)
    m = int(round(holdout * data.n))
    held, rest = np.sort(perm[:m]), np.sort(perm[m:])
    pi = parse_weighting_spec(spec, data.subset(held), config)
    return pi, data.subset(rest)
