"""Finite laws over ``(L, U, Z, A, Y)`` with exact enumeration.

A :class:`DiscreteLaw` stores

* ``p_l[l]``, ``p_u_l[l, u]``, ``p_z_l[l, z]`` (so ``Z`` is independent of ``U`` given ``L``)
* ``p_a_zul[l, z, u, a]``
* ``y_mean[l, u, a] = E[Y(a) | U = u, L = l]`` and a noise scale ``y_sd``

Every nuisance, estimand and conditional expectation of a score is computed
by summing over the finite support, which makes these laws the exact
reference for the score and diagnostics tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import Dataset, make_rng
from ..exceptions import MisuseError
from ..nuisance import FunctionalNuisance, WeightingFunction

_TOL = 1e-12


def _lookup(support, values):
    """Indices of ``values`` in the sorted ``support``; raises on strangers."""
    support = np.asarray(support, dtype=float)
    values = np.asarray(values, dtype=float)
    idx = np.searchsorted(support, values)
    idx = np.clip(idx, 0, support.size - 1)
    if not np.all(support[idx] == values):
        bad = values[support[idx] != values].ravel()[0]
        raise MisuseError(f"value {bad} is not in the support {support.tolist()}")
    return idx


@dataclass
class DiscreteLaw:
    l_vals: np.ndarray
    u_vals: np.ndarray
    z_vals: np.ndarray
    a_vals: np.ndarray
    p_l: np.ndarray
    p_u_l: np.ndarray
    p_z_l: np.ndarray
    p_a_zul: np.ndarray
    y_mean: np.ndarray
    y_sd: float = 1.0
    name: str = "toy"

    def __post_init__(self):
        for attr in ("l_vals", "u_vals", "z_vals", "a_vals", "p_l", "p_u_l", "p_z_l",
                     "p_a_zul", "y_mean"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=float))
        nl, nu, nz, na = (self.l_vals.size, self.u_vals.size, self.z_vals.size, self.a_vals.size)
        shapes = {"p_l": (nl,), "p_u_l": (nl, nu), "p_z_l": (nl, nz),
                  "p_a_zul": (nl, nz, nu, na), "y_mean": (nl, nu, na)}
        for attr, shape in shapes.items():
            if getattr(self, attr).shape != shape:
                raise ValueError(f"{attr} has shape {getattr(self, attr).shape}, expected {shape}")
        for vals in (self.l_vals, self.u_vals, self.z_vals, self.a_vals):
            if np.any(np.diff(vals) <= 0):
                raise ValueError("supports must be strictly increasing")
        for attr, axis in (("p_l", 0), ("p_u_l", 1), ("p_z_l", 1), ("p_a_zul", 3)):
            tab = getattr(self, attr)
            if np.any(tab < 0) or np.max(np.abs(tab.sum(axis=axis) - 1.0)) > _TOL:
                raise ValueError(f"{attr} is not a probability table (sums must be 1 within 1e-12)")

    # -- joint law -----------------------------------------------------------
    @property
    def joint(self) -> np.ndarray:
        """``P(L=l, U=u, Z=z, A=a)`` with axes ``(l, z, u, a)``."""
        return (self.p_l[:, None, None, None] * self.p_z_l[:, :, None, None]
                * self.p_u_l[:, None, :, None] * self.p_a_zul)

    def cells(self) -> dict:
        """Every ``(l, z, u, a)`` cell as flat arrays with its probability."""
        nl, nz, nu, na = self.p_a_zul.shape
        il, iz, iu, ia = (g.ravel() for g in np.meshgrid(np.arange(nl), np.arange(nz),
                                                         np.arange(nu), np.arange(na),
                                                         indexing="ij"))
        return {"L": self.l_vals[il][:, None], "Z": self.z_vals[iz][:, None],
                "U": self.u_vals[iu][:, None], "A": self.a_vals[ia],
                "Y": self.y_mean[il, iu, ia], "w": self.joint.ravel(),
                "il": il, "iz": iz, "iu": iu, "ia": ia}

    def emp_measure(self) -> dict:
        """The population law of ``(Z, L)`` as weighted rows."""
        nl, nz = self.p_z_l.shape
        il, iz = (g.ravel() for g in np.meshgrid(np.arange(nl), np.arange(nz), indexing="ij"))
        return {"Z": self.z_vals[iz][:, None], "L": self.l_vals[il][:, None],
                "w": (self.p_l[:, None] * self.p_z_l).ravel()}

    def expect_given_a(self, values: np.ndarray, a: float) -> float:
        """``E[g | A = a]`` for ``values = g`` evaluated on :meth:`cells`."""
        c = self.cells()
        sel = c["A"] == a
        w = c["w"][sel]
        return float(np.sum(w * np.asarray(values)[sel]) / np.sum(w))

    # -- margins ---------------------------------------------------------------
    def p_a_l(self) -> np.ndarray:
        """``P(A=a | L=l)``, axes ``(l, a)``."""
        return np.einsum("lz,lu,lzua->la", self.p_z_l, self.p_u_l, self.p_a_zul)

    def p_a_zl(self) -> np.ndarray:
        """``P(A=a | Z=z, L=l)``, axes ``(l, z, a)``."""
        return np.einsum("lu,lzua->lza", self.p_u_l, self.p_a_zul)

    def p_a_ul(self) -> np.ndarray:
        """``P(A=a | U=u, L=l)``, axes ``(l, u, a)``."""
        return np.einsum("lz,lzua->lua", self.p_z_l, self.p_a_zul)

    def p_a(self) -> np.ndarray:
        return self.p_l @ self.p_a_l()

    def theta(self) -> np.ndarray:
        """``E[Y(a)]`` for every support point of ``A``."""
        return np.einsum("l,lu,lua->a", self.p_l, self.p_u_l, self.y_mean)

    def theta_at(self, a) -> float:
        return float(self.theta()[_lookup(self.a_vals, a)])

    def psi(self, q) -> float:
        """``sum_a q(a) P(A=a) theta(a)``."""
        return float(np.sum(np.asarray(q(self.a_vals), dtype=float) * self.p_a() * self.theta()))

    # -- weighting functions -----------------------------------------------
    def pi_table(self, pi) -> np.ndarray:
        """``pi`` evaluated on the ``(l, z)`` grid."""
        if isinstance(pi, np.ndarray):
            return pi
        nl, nz = self.p_z_l.shape
        Lg, Zg = np.meshgrid(self.l_vals, self.z_vals, indexing="ij")
        return np.asarray(pi(Zg.reshape(-1, 1), Lg.reshape(-1, 1)), dtype=float).reshape(nl, nz)

    def weighting_from_table(self, table, name="table") -> WeightingFunction:
        table = np.asarray(table, dtype=float)
        law = self

        def fn(Z, L):
            return table[_lookup(law.l_vals, L[:, 0]), _lookup(law.z_vals, Z[:, 0])]

        return WeightingFunction("custom_table", fn, float(np.max(np.abs(table))),
                                 {"name": name})

    # -- exact nuisances ---------------------------------------------------
    def exact_tables(self, pi) -> dict:
        """``rho[l]`` and ``kappa, eta, mu, delta, m_z, m_yz[l, a]`` for a weighting table."""
        P = self.pi_table(pi)
        pal = self.p_a_l()
        # E[g(z) h(u,a) | A=a, L=l] * p(a|l) = sum_{z,u} g p(z|l) p(u|l) p(a|z,u,l) h
        w = self.p_z_l[:, :, None, None] * self.p_u_l[:, None, :, None] * self.p_a_zul
        rho = np.sum(self.p_z_l * P, axis=1)
        m_z = np.einsum("lz,lzua->la", P, w) / pal
        eta = np.einsum("lua,lzua->la", self.y_mean, w) / pal
        m_yz = np.einsum("lz,lua,lzua->la", P, self.y_mean, w) / pal
        kappa = m_z - rho[:, None]
        mu = (m_yz - eta * rho[:, None]) / kappa
        delta = self.p_a()[None, :] / pal
        return {"rho": rho, "kappa": kappa, "eta": eta, "mu": mu, "delta": delta,
                "m_z": m_z, "m_yz": m_yz, "p_a_l": pal}

    def nuisance_from_tables(self, tables: dict) -> FunctionalNuisance:
        """Wrap ``rho[l]`` and ``kappa, eta, mu, delta[l, a]`` tables as a nuisance vector."""
        law = self
        rho_t = np.asarray(tables["rho"], dtype=float)

        def il(L):
            return _lookup(law.l_vals, np.asarray(L)[:, 0])

        def ia(a):
            return _lookup(law.a_vals, a)

        def table_fn(name):
            tab = np.asarray(tables[name], dtype=float)
            return lambda a, L: tab[il(L), ia(a)]

        def outer(a, L):
            i_l, i_a = il(L), ia(a)
            return {name: np.asarray(tables[name], dtype=float)[np.ix_(i_l, i_a)].T
                    for name in ("kappa", "eta", "mu")} | {"rho": rho_t[i_l]}

        return FunctionalNuisance(lambda L: rho_t[il(L)], table_fn("kappa"), table_fn("eta"),
                                  table_fn("mu"), table_fn("delta"), outer=outer)

    def exact_nuisance(self, pi) -> FunctionalNuisance:
        return self.nuisance_from_tables(self.exact_tables(pi))

    # -- diagnostics references --------------------------------------------
    def chi2_divergence(self) -> np.ndarray:
        """``Var[p(a|Z,l) / p(a|l) | L=l]``, axes ``(l, a)``."""
        r = self.p_a_zl() / self.p_a_l()[:, None, :]
        return np.einsum("lz,lza->la", self.p_z_l, (r - 1.0) ** 2)

    def omega(self, pi) -> np.ndarray:
        """AIV weight ``omega_{a,pi}(u, l)``, axes ``(l, u, a)``."""
        P = self.pi_table(pi)
        rho = np.sum(self.p_z_l * P, axis=1)
        centred = P - rho[:, None]
        num = np.einsum("lz,lz,lzua->lua", centred, self.p_z_l, self.p_a_zul)
        t = self.exact_tables(P)
        den = (t["p_a_l"] * t["kappa"])[:, None, :]
        return num / den

    def is_additive(self, tol: float = 1e-12) -> bool:
        """Whether ``p(a|z,u,l)`` splits as ``b(z,l) + c(u,l)`` for every ``a``."""
        T = self.p_a_zul
        resid = (T - T.mean(axis=1, keepdims=True) - T.mean(axis=2, keepdims=True)
                 + T.mean(axis=(1, 2), keepdims=True))
        return bool(np.max(np.abs(resid)) <= tol)

    # -- sampling ------------------------------------------------------------
    def sample(self, n: int, seed: int = 0, *stream: int) -> Dataset:
        rng = make_rng(seed, *stream)
        c = self.cells()
        w = c["w"] / c["w"].sum()
        idx = rng.choice(w.size, size=n, p=w)
        noise = rng.standard_normal(n) * self.y_sd
        return Dataset(L=c["L"][idx], Z=c["Z"][idx], A=c["A"][idx], Y=c["Y"][idx] + noise,
                       latent_u=c["U"][idx],
                       treatment_support=(float(self.a_vals[0]), float(self.a_vals[-1])))

    # -- serialization ---------------------------------------------------------
    def to_json(self) -> dict:
        return {"name": self.name, "y_sd": self.y_sd,
                **{k: np.asarray(getattr(self, k)).tolist()
                   for k in ("l_vals", "u_vals", "z_vals", "a_vals", "p_l", "p_u_l", "p_z_l",
                             "p_a_zul", "y_mean")}}

    @classmethod
    def from_json(cls, obj: dict) -> "DiscreteLaw":
        return cls(**obj)

    def enumerate_law(self) -> dict:
        """Serializable summary: tables plus exact estimands."""
        return {"law": self.to_json(), "theta": self.theta().tolist(),
                "p_a": self.p_a().tolist(), "additive": self.is_additive()}


# ---------------------------------------------------------------------------
# factories
# ---------------------------------------------------------------------------


def _dirichlet(rng, shape, k, conc=2.0):
    return rng.dirichlet(np.full(k, conc), size=shape)


def additive_toy(seed: int = 0, n_l: int = 2, n_u: int = 2, n_z: int = 2, n_a: int = 3,
                 weight: float = 0.6, name: Optional[str] = None) -> DiscreteLaw:
    """Random law whose treatment table is a mixture ``w b(z,l) + (1-w) c(u,l)``.

    Draws are repeated until ``kappa`` for ``pi = z`` stays at least 0.02 away
    from zero so the law is a usable identification instance.
    """
    rng = make_rng(seed, 11)
    for _ in range(1000):
        b = _dirichlet(rng, (n_l, n_z), n_a)
        c = _dirichlet(rng, (n_l, n_u), n_a)
        law = DiscreteLaw(
            l_vals=np.arange(n_l, dtype=float), u_vals=np.arange(n_u, dtype=float),
            z_vals=np.arange(n_z, dtype=float), a_vals=np.arange(n_a, dtype=float) - (n_a - 1) / 2,
            p_l=_dirichlet(rng, (), n_l, 5.0), p_u_l=_dirichlet(rng, (n_l,), n_u, 5.0),
            p_z_l=_dirichlet(rng, (n_l,), n_z, 5.0),
            p_a_zul=weight * b[:, :, None, :] + (1 - weight) * c[:, None, :, :],
            y_mean=rng.normal(size=(n_l, n_u, n_a)) + 2.0 * np.arange(n_u)[None, :, None],
            y_sd=1.0, name=name or f"additive-{seed}")
        if np.min(np.abs(law.exact_tables(lambda Z, L: Z[:, 0])["kappa"])) > 0.02:
            return law
    raise RuntimeError("could not draw a relevant additive law")


def multiplicative_toy(seed: int = 0, n_l: int = 2, n_u: int = 2, n_z: int = 2, n_a: int = 3,
                       interaction: float = 2.5) -> DiscreteLaw:
    """Law with a ``z * u`` interaction in a multinomial-logit treatment model."""
    rng = make_rng(seed, 12)
    alpha = rng.normal(size=(n_l, n_a))
    beta = rng.normal(size=n_a)
    gamma = rng.normal(size=n_a)
    tau = interaction * np.linspace(-1, 1, n_a)
    z = np.arange(n_z, dtype=float)
    u = np.arange(n_u, dtype=float)
    logits = (alpha[:, None, None, :] + beta * z[None, :, None, None]
              + gamma * u[None, None, :, None]
              + tau * (z[:, None] * u[None, :])[None, :, :, None])
    p = np.exp(logits - logits.max(axis=3, keepdims=True))
    p /= p.sum(axis=3, keepdims=True)
    return DiscreteLaw(
        l_vals=np.arange(n_l, dtype=float), u_vals=u, z_vals=z,
        a_vals=np.arange(n_a, dtype=float) - (n_a - 1) / 2,
        p_l=np.full(n_l, 1.0 / n_l), p_u_l=np.full((n_l, n_u), 1.0 / n_u),
        p_z_l=np.full((n_l, n_z), 1.0 / n_z), p_a_zul=p,
        y_mean=rng.normal(size=(n_l, n_u, n_a)) + 2.0 * u[None, :, None],
        y_sd=1.0, name=f"multiplicative-{seed}")


def unconfounded_toy(seed: int = 0, n_l: int = 2, n_z: int = 2, n_a: int = 3) -> DiscreteLaw:
    """Additive law with a single latent level, so no unmeasured confounding."""
    law = additive_toy(seed, n_l=n_l, n_u=1, n_z=n_z, n_a=n_a)
    law.name = f"unconfounded-{seed}"
    return law


def nuc_reduction_toy(seed: int = 0, n_l: int = 2, n_a: int = 3) -> DiscreteLaw:
    """``Z`` is a copy of ``A`` and there is no latent confounder."""
    rng = make_rng(seed, 13)
    vals = np.arange(n_a, dtype=float) - (n_a - 1) / 2
    p_a_zul = np.zeros((n_l, n_a, 1, n_a))
    for j in range(n_a):
        p_a_zul[:, j, 0, j] = 1.0
    return DiscreteLaw(
        l_vals=np.arange(n_l, dtype=float), u_vals=np.zeros(1), z_vals=vals, a_vals=vals,
        p_l=_dirichlet(rng, (), n_l, 5.0), p_u_l=np.ones((n_l, 1)),
        p_z_l=_dirichlet(rng, (n_l,), n_a, 5.0), p_a_zul=p_a_zul,
        y_mean=rng.normal(size=(n_l, 1, n_a)), y_sd=1.0, name=f"nuc-reduction-{seed}")


def uniform_toy(n_l: int = 2, n_u: int = 2, n_z: int = 2, n_a: int = 3) -> DiscreteLaw:
    """Everything uniform and ``Y`` constant in ``a``; relevance is nil."""
    return DiscreteLaw(
        l_vals=np.arange(n_l, dtype=float), u_vals=np.arange(n_u, dtype=float),
        z_vals=np.arange(n_z, dtype=float), a_vals=np.arange(n_a, dtype=float),
        p_l=np.full(n_l, 1.0 / n_l), p_u_l=np.full((n_l, n_u), 1.0 / n_u),
        p_z_l=np.full((n_l, n_z), 1.0 / n_z), p_a_zul=np.full((n_l, n_z, n_u, n_a), 1.0 / n_a),
        y_mean=np.tile(np.arange(n_u, dtype=float)[None, :, None], (n_l, 1, n_a)),
        name="uniform")


def toy_from_params(params: dict) -> DiscreteLaw:
    """Build a law from a parameter mapping (as read from a JSON or key-value file)."""
    kind = params.get("kind", "additive")
    if kind == "tables":
        return DiscreteLaw.from_json({k: v for k, v in params.items() if k != "kind"})
    sizes = {k: int(params[k]) for k in ("n_l", "n_u", "n_z", "n_a") if k in params}
    seed = int(params.get("seed", 0))
    if kind == "additive":
        return additive_toy(seed, **sizes)
    if kind == "multiplicative":
        return multiplicative_toy(seed, **sizes)
    if kind == "uniform":
        return uniform_toy(**sizes)
    raise ValueError(f"unknown toy kind {kind!r}")


def load_toy(path) -> DiscreteLaw:
    from ..core import read_keyvalue
    text = open(path).read()
    try:
        params = json.loads(text)
    except json.JSONDecodeError:
        params = read_keyvalue(path)
    return toy_from_params(params)
