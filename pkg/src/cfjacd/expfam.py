"""Exponential-family algebra for complex Gaussian, categorical and Bernoulli-Gaussian laws.

Products and quotients of densities are additions and subtractions of the
natural parameters. A Gaussian ``CN(mu, C)`` is carried as ``(gamma, lam)``
with ``lam = C^{-1}`` and ``gamma = C^{-1} mu``. A Bernoulli-Gaussian law

    (1 - p) * [x = 0] + p * CN(x | mu, C)

adds one more natural parameter, ``kappa = log((1 - p) / p) + A_G(gamma, lam)``,
where ``A_G`` is the Gaussian log-partition function.
"""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from . import linalg

#: Bernoulli probabilities are kept inside this band before taking a logit.
PROB_CLAMP = 1e-12


class ExpFamError(ValueError):
    pass


class SingularMatrix(ExpFamError):
    pass


class NotProper(ExpFamError):
    pass


class DegenerateBernoulli(ExpFamError):
    pass


class SupportMismatch(ExpFamError):
    pass


def _vec(x):
    return np.atleast_1d(np.asarray(x, dtype=complex))


def _mat(a):
    a = np.asarray(a, dtype=complex)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, 1) if a.size == 1 else np.diag(a)
    return a


@dataclass(frozen=True)
class GaussianMoment:
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _vec(self.mu))
        object.__setattr__(self, "cov", _mat(self.cov))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class GaussianNat:
    """Complex Gaussian in natural parameters; ``lam == 0`` is the uninformative message."""

    gamma: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", _vec(self.gamma))
        object.__setattr__(self, "lam", linalg.herm(_mat(self.lam)))

    @classmethod
    def identity(cls, n: int = 1) -> "GaussianNat":
        return cls(np.zeros(n, complex), np.zeros((n, n), complex))

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    @property
    def is_proper(self) -> bool:
        return bool(linalg.is_pd(self.lam))

    def log_partition(self) -> float:
        if not self.is_proper:
            raise NotProper("log-partition needs a positive definite precision")
        return float(linalg.log_partition(self.gamma, self.lam))


@dataclass(frozen=True)
class BgNat:
    """Bernoulli-Gaussian law in natural parameters ``(kappa, gamma, lam)``."""

    kappa: float
    gauss: GaussianNat

    @classmethod
    def identity(cls, n: int = 1) -> "BgNat":
        return cls(0.0, GaussianNat.identity(n))

    @property
    def dim(self) -> int:
        return self.gauss.dim


@dataclass(frozen=True)
class Categorical:
    support: tuple
    logp: np.ndarray = field(repr=False)

    def __post_init__(self):
        support = tuple(self.support)
        if not support:
            raise ValueError("categorical support must be non-empty")
        logp = np.asarray(self.logp, dtype=float)
        if logp.shape != (len(support),):
            raise ValueError("logp must have one entry per support point")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "logp", logp)

    @classmethod
    def uniform(cls, support: Sequence) -> "Categorical":
        n = len(support)
        return cls(tuple(support), np.full(n, -np.log(n)))

    @classmethod
    def from_probs(cls, support: Sequence, p) -> "Categorical":
        with np.errstate(divide="ignore"):
            return cls(tuple(support), np.log(np.asarray(p, dtype=float))).normalized()

    def normalized(self) -> "Categorical":
        return Categorical(self.support, self.logp - logsumexp(self.logp))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp - logsumexp(self.logp))


# --- Gaussian -------------------------------------------------------------


def gauss_to_natural(m: GaussianMoment) -> GaussianNat:
    if not linalg.is_pd(m.cov):
        raise SingularMatrix("covariance is not positive definite")
    gamma, lam = linalg.to_natural(m.mu, m.cov)
    return GaussianNat(gamma, lam)


def gauss_to_moment(n: GaussianNat) -> GaussianMoment:
    if not n.is_proper:
        raise NotProper("precision is not positive definite")
    mu, cov = linalg.to_moment(n.gamma, n.lam)
    return GaussianMoment(mu, cov)


def gauss_logpdf(x, m: GaussianMoment) -> float:
    if not linalg.is_pd(m.cov):
        raise SingularMatrix("covariance is not positive definite")
    return float(linalg.cn_logpdf(_vec(x), m.mu, m.cov))


def gauss_multiply(a: GaussianNat, b: GaussianNat):
    """Product of two Gaussians.

    Returns the natural parameters of the normalized product and the log of
    the normalization constant ``CN(0 | mu_a - mu_b, C_a + C_b)``. The constant
    is ``None`` unless both factors are proper densities.
    """
    prod = GaussianNat(a.gamma + b.gamma, a.lam + b.lam)
    if not (a.is_proper and b.is_proper):
        return prod, None
    ma, mb = gauss_to_moment(a), gauss_to_moment(b)
    log_z = linalg.cn_logpdf_zero(ma.mu - mb.mu, ma.cov + mb.cov)
    return prod, float(log_z)


def gauss_divide(a: GaussianNat, b: GaussianNat) -> GaussianNat:
    return GaussianNat(a.gamma - b.gamma, a.lam - b.lam)


# --- Bernoulli-Gaussian ---------------------------------------------------


def logit_inactive(p: float) -> float:
    """``log((1 - p) / p)``, the natural parameter of the inactivity indicator."""
    return float(np.log1p(-p) - np.log(p))


def bg_from_moments(lam: float, m: GaussianMoment) -> BgNat:
    if not 0.0 < lam < 1.0:
        raise DegenerateBernoulli(f"activity probability {lam} must lie strictly in (0, 1)")
    g = gauss_to_natural(m)
    return BgNat(logit_inactive(lam) + g.log_partition(), g)


def bg_activity(b: BgNat) -> float:
    """Activity probability ``1 / (1 + exp(kappa - A_G))``."""
    if not b.gauss.is_proper:
        raise NotProper("activity is undefined for an improper Gaussian part")
    return float(expit(b.gauss.log_partition() - b.kappa))


def bg_to_moments(b: BgNat):
    """Return ``(activity, GaussianMoment)``."""
    return bg_activity(b), gauss_to_moment(b.gauss)


def bg_log_partition(b: BgNat) -> float:
    return float(np.logaddexp(b.gauss.log_partition(), b.kappa))


def bg_logpdf(x, b: BgNat) -> float:
    """Log of ``exp(eta^H u(x) - A_BG)``.

    At ``x = 0`` this is the log of the point mass ``1 - p``; elsewhere it is
    the log of the density of the slab scaled by ``p``.
    """
    x = _vec(x)
    g = b.gauss
    inner = 2.0 * np.real(np.vdot(g.gamma, x)) - float(linalg.quad(g.lam, x))
    if not np.any(x):
        inner += b.kappa
    return float(inner - bg_log_partition(b))


def bg_multiply(a: BgNat, b: BgNat):
    """Product of two BG laws.

    The normalized product is the sum of natural parameters. The log
    normalization constant ``log(p_a p_b CN(0 | mu_a - mu_b, C_a + C_b)
    + (1 - p_a)(1 - p_b))`` is returned when both factors are proper and
    ``None`` otherwise.
    """
    g, _ = gauss_multiply(a.gauss, b.gauss)
    prod = BgNat(a.kappa + b.kappa, g)
    if not (a.gauss.is_proper and b.gauss.is_proper):
        return prod, None
    pa, ma = bg_to_moments(a)
    pb, mb = bg_to_moments(b)
    log_match = linalg.cn_logpdf_zero(ma.mu - mb.mu, ma.cov + mb.cov)
    log_z = np.logaddexp(np.log(pa) + np.log(pb) + log_match, np.log1p(-pa) + np.log1p(-pb))
    return prod, float(log_z)


def bg_multiply_gaussian(a: BgNat, g: GaussianNat) -> BgNat:
    return BgNat(a.kappa, GaussianNat(a.gauss.gamma + g.gamma, a.gauss.lam + g.lam))


def bg_divide(a: BgNat, b: BgNat) -> BgNat:
    return BgNat(a.kappa - b.kappa, gauss_divide(a.gauss, b.gauss))


# --- categorical ----------------------------------------------------------


def cat_combine(msgs: Sequence[Categorical]) -> Categorical:
    """Normalized product of categorical messages over a shared support."""
    if not msgs:
        raise ValueError("need at least one message")
    support = msgs[0].support
    for m in msgs[1:]:
        if m.support != support:
            raise SupportMismatch("categorical supports differ")
    total = np.sum([m.logp for m in msgs], axis=0)
    return Categorical(support, total).normalized()


def clamp_prob(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def activity_from_natural(kappa, log_partition):
    """Vectorised ``1 / (1 + exp(kappa - A_G))``."""
    return expit(log_partition - kappa)


def kappa_from_activity(p, log_partition):
    """Vectorised inverse of :func:`activity_from_natural` with clamping."""
    p = clamp_prob(p)
    return np.log1p(-p) - np.log(p) + log_partition
