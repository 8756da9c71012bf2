"""The continuous simulation design and its closed-form nuisance oracle.

Data are generated as::

    L = eps_L - 0.5
    U = u_scale * (eps_U - 0.5)
    Z = z_l * L + z_scale * (eps_Z - 0.5)
    logit p_z = logit_z * Z + eps_AZ,   logit p_u = logit_u * U + eps_AU
    A = 2 eps_A p_z + 2 (1 - eps_A) p_u - 1
    Y = y_a * A + y_u * U + y_l * L

with ``eps_L, eps_U, eps_Z ~ Unif(0, 1)``, ``eps_AZ, eps_AU ~ N(0, 1)`` and
``eps_A ~ Bernoulli(p_a)``.  The treatment density is a mixture of a
Z-component and a U-component, so it is additive in ``(z, u)`` and the true
curve is ``theta(a) = y_a * a``.

Writing ``x = logit((a + 1) / 2)`` and ``J = dA/dx``, each mixture component
is a Gaussian in ``x``; every nuisance below follows from integrals of
``phi``, ``z * phi`` and ``phi * phi`` against uniform laws, which have
closed forms in ``Phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.special import expit, logit, ndtr

from ..core import Dataset, make_rng
from ..nuisance import FunctionalNuisance, WeightingFunction

_SQRT2 = np.sqrt(2.0)
_SQRTPI = np.sqrt(np.pi)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _phi(x):
    return _INV_SQRT2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class DgpParams:
    """Coefficients of the simulation design (defaults reproduce the main design)."""

    z_l: float = -0.5
    z_scale: float = 3.0
    u_scale: float = 3.0
    logit_z: float = 2.0
    logit_u: float = -2.0
    p_a: float = 0.7
    y_a: float = 1.0
    y_u: float = 1.0
    y_l: float = -0.5
    binary_z: bool = False

    def as_record(self):
        return asdict(self)


VARIANTS = {
    "paper_main": DgpParams(),
    "unconfounded": DgpParams(y_u=0.0),
    "binary_iv_crossing": DgpParams(binary_z=True, z_l=0.0),
}


@dataclass(frozen=True)
class DgpSpec:
    n: int
    seed: int = 0
    variant: str = "paper_main"
    params: Optional[DgpParams] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.params is None:
            if self.variant not in VARIANTS:
                raise ValueError(f"unknown variant {self.variant!r}; "
                                 f"choose from {sorted(VARIANTS)} or pass params")
            object.__setattr__(self, "params", VARIANTS[self.variant])


class TrueDrf:
    """``theta(a) = slope * a``."""

    def __init__(self, slope):
        self.slope = float(slope)

    def __call__(self, a):
        return self.slope * np.asarray(a, dtype=float)


def simulate_dgp(spec: DgpSpec, *stream: int) -> Dataset:
    """Draw ``spec.n`` rows; ``stream`` keys select an independent substream."""
    p = spec.params
    n = spec.n
    rng = make_rng(spec.seed, *stream)
    unif = rng.random((n, 3))
    gauss = rng.standard_normal((n, 2))
    eps_a = rng.random(n) < p.p_a
    L = unif[:, 0] - 0.5
    U = p.u_scale * (unif[:, 1] - 0.5)
    if p.binary_z:
        Z = (unif[:, 2] < 0.5).astype(float)
        zsig = 2.0 * Z - 1.0
    else:
        Z = p.z_l * L + p.z_scale * (unif[:, 2] - 0.5)
        zsig = Z
    pz = expit(p.logit_z * zsig + gauss[:, 0])
    pu = expit(p.logit_u * U + gauss[:, 1])
    A = np.where(eps_a, 2.0 * pz, 2.0 * pu) - 1.0
    Y = p.y_a * A + p.y_u * U + p.y_l * L
    return Dataset(L=L[:, None], Z=Z[:, None], A=A, Y=Y, latent_u=U[:, None],
                   treatment_support=(-1.0, 1.0), true_drf=TrueDrf(p.y_a),
                   l_names=("l",), z_names=("z",))


# ---------------------------------------------------------------------------
# closed-form oracle
# ---------------------------------------------------------------------------


def _int_phi(x, lam, lo, hi):
    """``int_lo^hi phi(x - lam * z) dz``."""
    if lam == 0:
        return (hi - lo) * _phi(x)
    return (ndtr(x - lam * lo) - ndtr(x - lam * hi)) / lam


def _int_z_phi(x, lam, lo, hi):
    """``int_lo^hi z phi(x - lam * z) dz``."""
    if lam == 0:
        return 0.5 * (hi ** 2 - lo ** 2) * _phi(x)

    def F(s):
        return x * ndtr(s) + _phi(s)

    return (F(x - lam * lo) - F(x - lam * hi)) / lam ** 2


def _int_phi_phi(x0, x, lam, lo, hi):
    """``int_lo^hi phi(x0 - lam z) phi(x - lam z) dz``."""
    if lam == 0:
        return (hi - lo) * _phi(x0) * _phi(x)
    m = 0.5 * (x0 + x)
    pref = np.exp(-0.25 * (x0 - x) ** 2) / (2.0 * np.pi) * _SQRTPI / abs(lam)
    w_lo = np.minimum(lam * lo, lam * hi)
    w_hi = np.maximum(lam * lo, lam * hi)
    return pref * (ndtr(_SQRT2 * (w_hi - m)) - ndtr(_SQRT2 * (w_lo - m)))


class DgpOracle:
    """Exact densities and conditional moments of the continuous design.

    Only the continuous-instrument design is supported.  Arrays ``a`` and
    ``l`` broadcast against each other.
    """

    def __init__(self, params: DgpParams = DgpParams(), n_quad: int = 64):
        if params.binary_z:
            raise ValueError("the closed-form oracle covers the continuous instrument only")
        self.p = params
        nodes, weights = np.polynomial.legendre.leggauss(n_quad)
        self._lq = 0.5 * nodes  # L ~ Unif(-0.5, 0.5)
        self._lw = 0.5 * weights

    # -- building blocks ---------------------------------------------------
    @staticmethod
    def _x(a):
        t = (np.asarray(a, dtype=float) + 1.0) / 2.0
        return logit(t), 2.0 * t * (1.0 - t)

    def _z_range(self, l):
        c = self.p.z_l * np.asarray(l, dtype=float)
        return c - 0.5 * self.p.z_scale, c + 0.5 * self.p.z_scale

    def g1(self, a, l):
        """``E[f_Z(a | Z) | L = l]``."""
        x, J = self._x(a)
        lo, hi = self._z_range(l)
        return _int_phi(x, self.p.logit_z, lo, hi) / (J * self.p.z_scale)

    def g2(self, a):
        """``E[f_U(a | U)]``."""
        x, J = self._x(a)
        s = 0.5 * self.p.u_scale
        return _int_phi(x, self.p.logit_u, -s, s) / (J * self.p.u_scale)

    def m_u(self, a):
        """``E[U f_U(a | U)]``."""
        x, J = self._x(a)
        s = 0.5 * self.p.u_scale
        return _int_z_phi(x, self.p.logit_u, -s, s) / (J * self.p.u_scale)

    def f1(self, a, z):
        x, J = self._x(a)
        return _phi(x - self.p.logit_z * np.asarray(z, dtype=float)) / J

    def f2(self, a, u):
        x, J = self._x(a)
        return _phi(x - self.p.logit_u * np.asarray(u, dtype=float)) / J

    # -- densities -----------------------------------------------------------
    def p_a_given_zul(self, a, z, u, l=None):
        return self.p.p_a * self.f1(a, z) + (1.0 - self.p.p_a) * self.f2(a, u)

    def p_a_given_zl(self, a, z, l=None):
        return self.p.p_a * self.f1(a, z) + (1.0 - self.p.p_a) * self.g2(a)

    def p_a_given_l(self, a, l):
        return self.p.p_a * self.g1(a, l) + (1.0 - self.p.p_a) * self.g2(a)

    def p_a(self, a):
        a = np.asarray(a, dtype=float)
        vals = self.p_a_given_l(a[..., None], self._lq)
        return vals @ self._lw

    def delta(self, a, l):
        return self.p_a(a) / self.p_a_given_l(a, l)

    # -- moments -------------------------------------------------------------
    def eta(self, a, l):
        """``E[Y | A = a, L = l]``."""
        a = np.asarray(a, dtype=float)
        l = np.asarray(l, dtype=float)
        eu = (1.0 - self.p.p_a) * self.m_u(a) / self.p_a_given_l(a, l)
        return self.p.y_a * a + self.p.y_l * l + self.p.y_u * eu

    def theta(self, a):
        return self.p.y_a * np.asarray(a, dtype=float)

    def mu_true(self, a, l):
        """``E[Y(a) | L = l]``, which equals ``mu`` for every valid weighting function."""
        return self.p.y_a * np.asarray(a, dtype=float) + self.p.y_l * np.asarray(l, dtype=float)

    def pi_moments(self, a, l, pi_kind: str, a0: float = 0.5):
        """``(rho, E[pi | a, l])`` for ``pi = z`` or ``pi = p(a0 | z, l)``."""
        pa, pb = self.p.p_a, 1.0 - self.p.p_a
        a = np.asarray(a, dtype=float)
        l = np.asarray(l, dtype=float)
        lo, hi = self._z_range(l)
        pal = self.p_a_given_l(a, l)
        x, J = self._x(a)
        if pi_kind == "coordinate":
            rho = self.p.z_l * l
            num = pa * _int_z_phi(x, self.p.logit_z, lo, hi) / (J * self.p.z_scale) \
                + pb * self.g2(a) * rho
            return rho, num / pal
        if pi_kind == "density":
            x0, J0 = self._x(a0)
            rho = self.p_a_given_l(a0, l)
            cross = _int_phi_phi(x0, x, self.p.logit_z, lo, hi) / (J0 * J * self.p.z_scale)
            num = (pa * pa * cross
                   + pa * pb * (self.g2(a) * self.g1(a0, l) + self.g2(a0) * self.g1(a, l))
                   + pb * pb * self.g2(a0) * self.g2(a))
            return rho, num / pal
        raise ValueError(f"unknown weighting kind {pi_kind!r}")

    def nuisance(self, pi_kind: str = "density", a0: float = 0.5, kappa_floor: float = 0.0,
                 delta_cap: float = np.inf, interval=None) -> FunctionalNuisance:
        """The exact nuisance vector for ``pi = z`` or ``pi = p(a0 | z, l)``."""
        def rho(L):
            return self.pi_moments(0.0, L[:, 0], pi_kind, a0)[0]

        def kappa(a, L):
            r, m = self.pi_moments(a, L[:, 0], pi_kind, a0)
            return m - r

        def eta(a, L):
            return self.eta(a, L[:, 0])

        def mu(a, L):
            return self.mu_true(a, L[:, 0])

        def delta(a, L):
            return self.delta(a, L[:, 0])

        def outer(a, L):
            aa = a[:, None]
            ll = L[None, :, 0]
            r, m = self.pi_moments(aa, ll, pi_kind, a0)
            return {"rho": r[0] if r.ndim == 2 else np.broadcast_to(r, ll.shape)[0],
                    "kappa": m - r, "eta": self.eta(aa, ll), "mu": self.mu_true(aa, ll)}

        return FunctionalNuisance(rho, kappa, eta, mu, delta, kappa_floor=kappa_floor,
                                  delta_cap=delta_cap, interval=interval, outer=outer)

    def omega(self, a: float, U, L, pi_kind: str = "density", a0: float = 0.5,
              n_quad: int = 96) -> np.ndarray:
        """AIV weight ``omega_{a,pi}(u, l)`` by Gauss-Legendre quadrature over ``Z | L``."""
        u = np.asarray(U, dtype=float).ravel()
        l = np.asarray(L, dtype=float).ravel()
        nodes, weights = np.polynomial.legendre.leggauss(n_quad)
        lo, hi = self._z_range(l)
        z = 0.5 * (lo + hi)[:, None] + 0.5 * (hi - lo)[:, None] * nodes[None, :]
        if pi_kind == "coordinate":
            pz = z
        else:
            pz = self.p_a_given_zl(a0, z)
        rho, m = self.pi_moments(a, l, pi_kind, a0)
        rho = np.broadcast_to(rho, l.shape)
        inner = ((pz - rho[:, None]) * self.p_a_given_zul(a, z, u[:, None])) @ (0.5 * weights)
        return inner / (self.p_a_given_l(a, l) * (m - rho))

    def weighting_function(self, pi_kind: str = "density", a0: float = 0.5) -> WeightingFunction:
        """The exact weighting function matching :meth:`nuisance`."""
        if pi_kind == "coordinate":
            return WeightingFunction.coordinate(0, bound=np.inf)
        x0, J0 = self._x(a0)

        def fn(Z, L):
            return self.p_a_given_zl(a0, Z[:, 0])

        return WeightingFunction("conditional_density", fn, np.inf,
                                 {"a0": float(a0), "model": "oracle"})
