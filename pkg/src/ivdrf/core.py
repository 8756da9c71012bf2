"""Data model, CSV ingestion, fold planning and seeded randomness."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import EmptyDataError, ParseError, PlanError, SchemaError


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    """Counter-based child of ``seed``; the same keys always give the same stream."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys: int) -> int:
    """A plain 63-bit integer seed derived from ``seed`` and ``keys``."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """A single row ``O = [L, Z, A, Y]``; ``l`` may be empty."""

    l: np.ndarray
    z: np.ndarray
    a: float
    y: float

    def __post_init__(self):
        l = np.atleast_1d(np.asarray(self.l, dtype=float)).ravel()
        z = np.atleast_1d(np.asarray(self.z, dtype=float)).ravel()
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "y", float(self.y))
        if not (np.all(np.isfinite(l)) and np.all(np.isfinite(z))
                and math.isfinite(self.a) and math.isfinite(self.y)):
            raise ValueError("observation entries must be finite")


@dataclass(frozen=True)
class TargetInterval:
    """Closed target interval of treatment values, strictly inside the support."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    def check_interior(self, support):
        a_min, a_max = support
        if not (a_min < self.lo and self.hi < a_max):
            raise ValueError(
                f"interval [{self.lo}, {self.hi}] is not strictly inside the "
                f"treatment support [{a_min}, {a_max}]")

    def contains(self, a):
        a = np.asarray(a)
        return (a >= self.lo) & (a <= self.hi)

    def grid(self, size: int = 51) -> np.ndarray:
        return np.linspace(self.lo, self.hi, size)

    @property
    def width(self):
        return self.hi - self.lo

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)


def _as_2d(x, n):
    if x is None:
        return np.zeros((n, 0))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.size and (n == 0 or x.size % n):
            raise SchemaError("columns have different lengths")
        x = x.reshape(n, -1) if x.size else np.zeros((n, 0))
    return x


@dataclass(frozen=True)
class Dataset:
    """Columnar store of observations.

    ``L`` has shape ``(n, p)`` with ``p`` possibly 0, ``Z`` has shape ``(n, q)``.
    Simulated data may also carry the latent confounder ``U`` and the true
    dose-response curve.
    """

    L: np.ndarray
    Z: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    latent_u: Optional[np.ndarray] = None
    treatment_support: Optional[tuple] = None
    true_drf: Optional[object] = field(default=None, compare=False, repr=False)
    l_names: tuple = ()
    z_names: tuple = ()

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).ravel()
        n = A.shape[0]
        Y = np.asarray(self.Y, dtype=float).ravel()
        L = _as_2d(self.L, n)
        Z = _as_2d(self.Z, n)
        if Y.shape[0] != n or L.shape[0] != n or Z.shape[0] != n:
            raise SchemaError("columns have different lengths")
        for name, arr in (("L", L), ("Z", Z), ("A", A), ("Y", Y)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        U = self.latent_u
        if U is not None:
            U = _as_2d(U, n)
            if U.shape[0] != n:
                raise SchemaError("latent_u length differs from observations")
        support = self.treatment_support
        if support is None:
            support = (float(A.min()), float(A.max())) if n else (0.0, 0.0)
        else:
            support = (float(support[0]), float(support[1]))
            if n and (A.min() < support[0] or A.max() > support[1]):
                raise ValueError("treatment values fall outside treatment_support")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "latent_u", U)
        object.__setattr__(self, "treatment_support", support)
        if not self.l_names:
            object.__setattr__(self, "l_names", tuple(f"l{j}" for j in range(L.shape[1])))
        if not self.z_names:
            object.__setattr__(self, "z_names", tuple(f"z{j}" for j in range(Z.shape[1])))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def __len__(self):
        return self.n

    @property
    def l_dim(self) -> int:
        return self.L.shape[1]

    @property
    def z_dim(self) -> int:
        return self.Z.shape[1]

    def row(self, i: int) -> Observation:
        return Observation(self.L[i], self.Z[i], self.A[i], self.Y[i])

    @property
    def observations(self) -> list:
        return [self.row(i) for i in range(self.n)]

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], **kwargs) -> "Dataset":
        if not observations:
            raise EmptyDataError("no observations")
        p = {o.l.shape[0] for o in observations}
        q = {o.z.shape[0] for o in observations}
        if len(p) != 1 or len(q) != 1:
            raise SchemaError("observations disagree on covariate or instrument dimension")
        n = len(observations)
        L = np.array([o.l for o in observations]).reshape(n, p.pop())
        Z = np.array([o.z for o in observations]).reshape(n, q.pop())
        return cls(L=L, Z=Z, A=[o.a for o in observations], Y=[o.y for o in observations], **kwargs)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            L=self.L[idx], Z=self.Z[idx], A=self.A[idx], Y=self.Y[idx],
            latent_u=None if self.latent_u is None else self.latent_u[idx],
            treatment_support=self.treatment_support, true_drf=self.true_drf,
            l_names=self.l_names, z_names=self.z_names)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Column mapping for :func:`load_dataset`."""

    treatment: str
    outcome: str
    instruments: tuple
    covariates: tuple = ()
    latent: tuple = ()
    support: Optional[tuple] = None

    def __post_init__(self):
        if not self.instruments:
            raise SchemaError("schema needs at least one instrument column")
        object.__setattr__(self, "instruments", tuple(self.instruments))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "latent", tuple(self.latent))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "Schema":
        def names(key):
            v = mapping.get(key, ())
            if isinstance(v, str):
                v = [s.strip() for s in v.split(",") if s.strip()]
            return tuple(v)

        try:
            treatment = mapping["treatment"]
            outcome = mapping["outcome"]
        except KeyError as exc:
            raise SchemaError(f"schema is missing key {exc.args[0]!r}") from None
        support = mapping.get("support")
        if isinstance(support, str):
            support = tuple(float(s) for s in support.split(","))
        return cls(treatment=treatment, outcome=outcome, instruments=names("instruments"),
                   covariates=names("covariates"), latent=names("latent"), support=support)

    @classmethod
    def read(cls, path) -> "Schema":
        """Read a ``key = value`` schema file (``#`` starts a comment)."""
        return cls.from_mapping(read_keyvalue(path))


def read_keyvalue(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def load_dataset(path, schema: Schema) -> Dataset:
    """Read a CSV file with a header row into a :class:`Dataset`.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataError(f"{path} is empty") from None
        wanted = [schema.treatment, schema.outcome, *schema.covariates,
                  *schema.instruments, *schema.latent]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"columns not found in {path}: {', '.join(missing)}")
        pos = {c: header.index(c) for c in wanted}
        rows = []
        for rowno, rec in enumerate(reader, 1):
            if not rec or all(not s.strip() for s in rec):
                continue
            vals = []
            for c in wanted:
                try:
                    v = float(rec[pos[c]])
                except (ValueError, IndexError):
                    cell = rec[pos[c]] if pos[c] < len(rec) else ""
                    raise ParseError(f"row {rowno}, column {c!r}: cannot parse {cell!r}",
                                     row=rowno, column=c) from None
                if not math.isfinite(v):
                    raise ParseError(f"row {rowno}, column {c!r}: non-finite value",
                                     row=rowno, column=c)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise EmptyDataError(f"{path} has no data rows")
    M = np.array(rows, dtype=float)
    p, q = len(schema.covariates), len(schema.instruments)
    L = M[:, 2:2 + p]
    Z = M[:, 2 + p:2 + p + q]
    U = M[:, 2 + p + q:] if schema.latent else None
    return Dataset(L=L, Z=Z, A=M[:, 0], Y=M[:, 1], latent_u=U,
                   treatment_support=schema.support,
                   l_names=schema.covariates, z_names=schema.instruments)


def write_dataset(data: Dataset, path, include_latent: bool = False) -> Schema:
    """Write ``data`` as CSV using shortest round-trip decimal text.

    Returns the :class:`Schema` that reads the file back.
    """
    cov = list(data.l_names)
    ins = list(data.z_names)
    lat = []
    cols = [data.L, data.Z, data.A[:, None], data.Y[:, None]]
    if include_latent and data.latent_u is not None:
        lat = [f"u{j}" for j in range(data.latent_u.shape[1])]
        cols.append(data.latent_u)
    header = cov + ins + ["a", "y"] + lat
    M = np.hstack(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in M:
            w.writerow([repr(float(v)) for v in row])
    return Schema(treatment="a", outcome="y", instruments=tuple(ins),
                  covariates=tuple(cov), latent=tuple(lat))


# ---------------------------------------------------------------------------
# fold planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    """Folds ``I_k`` and, for each ``k``, a split of ``I_{-k}`` in two parts.

    ``fold_of[i]`` is the fold of row ``i``; ``subsplit_of[k]`` is an array over
    the sorted rows of ``I_{-k}`` holding 1 (nuisance training) or 2 (empirical
    measure).
    """

    n: int
    K: int
    fold_of: np.ndarray
    subsplit_of: dict
    seed: int
    subsplit_fraction: float = 0.5

    def fold_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def complement_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    def train_rows(self, k: int) -> np.ndarray:
        return self.complement_rows(k)[self.subsplit_of[k] == 1]

    def emp_rows(self, k: int) -> np.ndarray:
        return self.complement_rows(k)[self.subsplit_of[k] == 2]

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.K)


def make_folds(n: int, K: int, subsplit_fraction: float = 0.5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, contiguous blocks, then a seeded split of each complement."""
    if K < 2 or n < 2 * K:
        raise PlanError(f"need K >= 2 and n >= 2K (got n={n}, K={K})")
    if not 0.0 < subsplit_fraction < 1.0:
        raise PlanError("subsplit_fraction must lie in (0, 1)")
    perm = make_rng(seed, 0).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    for k, block in enumerate(np.array_split(perm, K)):
        fold_of[block] = k
    subsplit = {}
    for k in range(K):
        m = int(np.sum(fold_of != k))
        n1 = min(max(int(round(subsplit_fraction * m)), 1), m - 1)
        lab = np.full(m, 2, dtype=np.int64)
        lab[make_rng(seed, 1, k).permutation(m)[:n1]] = 1
        subsplit[k] = lab
    return FoldPlan(n=n, K=K, fold_of=fold_of, subsplit_of=subsplit, seed=seed,
                    subsplit_fraction=subsplit_fraction)


@dataclass(frozen=True)
class NestedFoldPlan:
    """Outer folds ``I_k`` and inner folds ``I_{k,j}`` used by nested cross-fitting."""

    n: int
    K: int
    J: int
    fold_of: np.ndarray
    inner_of: np.ndarray
    seed: int

    def fold_rows(self, k):
        return np.flatnonzero(self.fold_of == k)

    def train_rows(self, k):
        return np.flatnonzero(self.fold_of != k)

    def part_rows(self, k, j):
        return np.flatnonzero((self.fold_of == k) & (self.inner_of == j))

    def emp_rows(self, k, j):
        return np.flatnonzero((self.fold_of == k) & (self.inner_of != j))


def make_nested_folds(n: int, K: int, J: int = 2, seed: int = 0) -> NestedFoldPlan:
    if K < 2 or J < 2 or n < 2 * K * J:
        raise PlanError(f"need K >= 2, J >= 2 and n >= 2KJ (got n={n}, K={K}, J={J})")
    perm = make_rng(seed, 0).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    inner_of = np.empty(n, dtype=np.int64)
    for k, block in enumerate(np.array_split(perm, K)):
        fold_of[block] = k
        inner = make_rng(seed, 2, k).permutation(block)
        for j, part in enumerate(np.array_split(inner, J)):
            inner_of[part] = j
    return NestedFoldPlan(n=n, K=K, J=J, fold_of=fold_of, inner_of=inner_of, seed=seed)
