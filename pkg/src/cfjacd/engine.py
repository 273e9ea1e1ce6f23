"""Expectation-propagation message passing for joint activity, channel and data detection.

Every message of the factor graph is stored as one array over all edges of its
kind, indexed ``[l, k, t]`` (per AP, UE and channel use) or ``[l, k]``, with
trailing ``(N,)`` or ``(N, N)`` axes for vectors and matrices. One iteration
runs the ten update steps in a fixed order; each step updates all edges of
its kind at once.

Two variants share the schedule. ``JACD_EP`` models the effective channel
``g = h u`` with Gaussian messages; ``JACD_EP_BG`` uses Bernoulli-Gaussian
messages ``(kappa, gamma, lam)``.

Activities are handled in log-odds form throughout. The log-odds of a BG
message ``(kappa, gamma, lam)`` is ``A_G(gamma, lam) - kappa``.
"""

import enum
import json
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from . import linalg
from .expfam import PROB_CLAMP, SingularMatrix, clamp_prob

STEPS = (
    "y->z",
    "z->x",
    "x->z",
    "z->g",
    "g->psig",
    "psig->u",
    "u->psig",
    "psig->g",
    "g->z",
    "z->z",
)

#: A z->z message may carry at most this multiple of an active UE's prior energy.
ZZ_ENERGY_MARGIN = 10.0


class Variant(enum.Enum):
    JACD_EP = "jacd-ep"
    JACD_EP_BG = "jacd-ep-bg"

    @property
    def bg(self) -> bool:
        return self is Variant.JACD_EP_BG


@dataclass(frozen=True)
class EngineConfig:
    i_max: int = 20
    eta: float = 0.5
    init_iters: int = 20
    #: Reserved for pruning UEs with negligible large-scale gain; not implemented.
    prune_below: Optional[float] = None

    def __post_init__(self):
        if self.i_max < 0 or self.init_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.prune_below is not None:
            raise NotImplementedError("UE pruning is not implemented")


@dataclass(frozen=True)
class Observation:
    """Received block and the known transmit-side quantities."""

    y: np.ndarray  # (L, T, N)
    pilots: np.ndarray  # (K, Tp)
    constellation: np.ndarray  # (M,)
    sigma_n2: float
    sigma_x2: float

    @classmethod
    def from_received(cls, scenario, Y) -> "Observation":
        """Build from ``Y`` of shape ``(L, N, T)`` as stored in a realization."""
        return cls(np.swapaxes(np.asarray(Y), 1, 2), scenario.pilots, scenario.constellation,
                   scenario.sigma_n2, scenario.sigma_x2)

    @property
    def L(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def N(self) -> int:
        return self.y.shape[2]

    @property
    def K(self) -> int:
        return self.pilots.shape[0]

    @property
    def Tp(self) -> int:
        return self.pilots.shape[1]

    @property
    def Td(self) -> int:
        return self.T - self.Tp

    @property
    def M(self) -> int:
        return len(self.constellation)

    def pilot_part(self) -> "Observation":
        return Observation(self.y[:, : self.Tp], self.pilots, self.constellation, self.sigma_n2, self.sigma_x2)


@dataclass(frozen=True)
class Priors:
    """Activity priors ``pu = p(u_k = 1)`` and Gaussian channel priors per ``(l, k)``."""

    pu: np.ndarray  # (K,)
    mu: np.ndarray  # (L, K, N)
    cov: np.ndarray  # (L, K, N, N)
    gamma: np.ndarray = field(init=False, repr=False)
    lam: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cov = linalg.herm(np.asarray(self.cov, dtype=complex))
        if not np.all(linalg.is_pd(cov)):
            raise SingularMatrix("channel prior covariances must be positive definite")
        object.__setattr__(self, "pu", clamp_prob(np.asarray(self.pu, dtype=float)))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=complex))
        object.__setattr__(self, "cov", cov)
        gamma, lam = linalg.to_natural(self.mu, cov)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def model(cls, scenario) -> "Priors":
        corr = scenario.correlation()
        return cls(np.full(scenario.K, scenario.lam), np.zeros(corr.shape[:-1], complex), corr)

    @property
    def log_pu(self) -> np.ndarray:
        """``(K, 2)`` log-probabilities of ``u = 0`` and ``u = 1``."""
        return np.stack([np.log1p(-self.pu), np.log(self.pu)], axis=-1)


@dataclass
class MessageState:
    """All messages of the factor graph. Gaussian g-messages are kept in natural form."""

    yz_mu: np.ndarray
    yz_cov: np.ndarray
    yz_gamma: np.ndarray
    yz_lam: np.ndarray
    zz_mu: np.ndarray
    zz_cov: np.ndarray
    zx: np.ndarray  # (L, K, Td, M) log-probabilities
    xz: np.ndarray
    zg_kappa: np.ndarray  # (L, K, T)
    zg_gamma: np.ndarray
    zg_lam: np.ndarray
    gz_kappa: np.ndarray
    gz_gamma: np.ndarray
    gz_lam: np.ndarray
    gpsig_kappa: np.ndarray  # (L, K)
    gpsig_gamma: np.ndarray
    gpsig_lam: np.ndarray
    psigu: np.ndarray  # (L, K, 2) log-probabilities
    upsig: np.ndarray
    psigg_kappa: np.ndarray
    psigg_gamma: np.ndarray
    psigg_lam: np.ndarray
    fronthaul: dict = field(default_factory=dict)

    def copy(self) -> "MessageState":
        return MessageState(**{f.name: (v.copy() if isinstance(v, np.ndarray) else dict(v))
                               for f in fields(self) for v in [getattr(self, f.name)]})


@dataclass
class Estimates:
    u_hat: np.ndarray  # (K,)
    soft_u: np.ndarray  # (K,)
    h_hat: np.ndarray  # (L, K, N)
    x_idx: np.ndarray  # (K, Td)
    x_hat: np.ndarray  # (K, Td)
    soft_x: np.ndarray  # (K, Td, M)
    g_hat: np.ndarray  # (L, K, N)
    fronthaul: list = field(default_factory=list)


# --- helpers --------------------------------------------------------------


def _moments(gamma, lam):
    with np.errstate(all="ignore"):
        return linalg.to_moment(gamma, lam)


def _natural(mu, cov):
    with np.errstate(all="ignore"):
        return linalg.to_natural(mu, cov)


def _log_partition(gamma, lam):
    with np.errstate(all="ignore"):
        return linalg.log_partition(gamma, lam)


def _logpdf0(mu, cov):
    with np.errstate(all="ignore"):
        return linalg.cn_logpdf_zero(mu, cov)


def _logsumexp(a):
    """Log-sum-exp over the last axis, keeping it (short axes, so no scipy overhead)."""
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True))


def _normalize(logp):
    return logp - _logsumexp(logp)


def _log_sigmoid(a):
    return -np.logaddexp(0.0, -a)


def _weights(eta):
    with np.errstate(divide="ignore"):
        return np.log(eta), np.log1p(-eta)


def damp_categorical(old, new, eta):
    """Convex combination ``eta * new + (1 - eta) * old`` of probabilities, in the log domain."""
    le, lo = _weights(eta)
    return _normalize(np.logaddexp(le + new, lo + old))


def damp_gaussian(old_mu, old_cov, new_mu, new_cov, eta):
    return eta * new_mu + (1 - eta) * old_mu, eta * new_cov + (1 - eta) * old_cov


def _damp_natural(old, new, eta, bg):
    """Damp natural-form messages ``(kappa, gamma, lam)``.

    Where the old message is a proper density, Gaussian messages are damped
    over their moments and BG messages over their natural parameters; the
    latter keeps exact identities such as a zero ``kappa`` on pilot slots.
    Where the old message is improper (the uninformative initial message)
    the new message is taken as is.
    """
    ok, og, ol = old
    nk, ng, nl = new
    old_pd = linalg.is_pd(ol)
    if bg:
        kappa = eta * nk + (1 - eta) * ok
        gamma = eta * ng + (1 - eta) * og
        lam = eta * nl + (1 - eta) * ol
    else:
        mo, co = _moments(og, ol)
        mn, cn = _moments(ng, nl)
        gamma, lam = _natural(*damp_gaussian(mo, co, mn, cn, eta))
        kappa = nk
    kappa = np.where(old_pd, kappa, nk)
    gamma = np.where(old_pd[..., None], gamma, ng)
    lam = np.where(old_pd[..., None, None], lam, nl)
    return kappa, gamma, linalg.herm(lam)


def _accept(ok, new, old):
    """Keep ``new`` where ``ok`` holds and ``old`` elsewhere (per-message guard)."""
    extra = new.ndim - ok.ndim
    return np.where(ok.reshape(ok.shape + (1,) * extra), new, old)


def _finite(*arrays, ndim):
    out = None
    for a in arrays:
        f = np.isfinite(a)
        if a.ndim > ndim:
            f = np.all(f, axis=tuple(range(ndim, a.ndim)))
        out = f if out is None else out & f
    return out


def _count(state, edge, n):
    state.fronthaul[edge] = state.fronthaul.get(edge, 0) + int(n)


def _data_components(state, obs, gz_mu, gz_cov):
    """Per-symbol quantities for data slots, with a trailing symbol axis.

    Returns ``log theta(x)`` with shape ``(L, K, Td, M)`` and the moments
    ``(mu_tmp, C_tmp)`` of ``z`` given ``x``, i.e. the normalized product of
    ``m_{y->z}(z)`` and ``m_{g->z}(z / x)``. The result is cached on the
    state for as long as both input messages are the same array objects
    (updates always rebind them).
    """
    key = (state.yz_gamma, state.gz_gamma, state.yz_lam, state.gz_lam)
    cache = state.__dict__.get("_components")
    if cache is not None and all(a is b for a, b in zip(cache[0], key)):
        return cache[1]
    out = _compute_data_components(state, obs, gz_mu, gz_cov)
    state.__dict__["_components"] = (key, out)
    return out


def _compute_data_components(state, obs, gz_mu, gz_cov):
    P = obs.Tp
    x = obs.constellation
    a2 = np.abs(x) ** 2
    ymu = state.yz_mu[:, :, P:, None, :]
    ycov = state.yz_cov[:, :, P:, None]
    gmu = gz_mu[:, :, P:, None, :]
    gcov = gz_cov[:, :, P:, None]
    log_theta = _logpdf0(ymu - gmu * x[:, None], ycov + gcov * a2[:, None, None])
    lam_t = state.yz_lam[:, :, P:, None] + state.gz_lam[:, :, P:, None] / a2[:, None, None]
    gam_t = state.yz_gamma[:, :, P:, None, :] + state.gz_gamma[:, :, P:, None, :] * (x / a2)[:, None]
    mu_t, cov_t = _moments(gam_t, lam_t)
    return log_theta, mu_t, cov_t


def _mixture(logw, mu, cov):
    """Moments of a Gaussian mixture along the symbol axis, in centered form."""
    w = np.exp(_normalize(logw))
    mean = np.sum(w[..., None] * mu, axis=-2)
    d = mu - mean[..., None, :]
    c = np.sum(w[..., None, None] * (cov + linalg.outer(d)), axis=-3)
    return mean, linalg.herm(c)


# --- initialization -------------------------------------------------------


def init_messages(priors: Priors, obs: Observation, variant: Variant) -> MessageState:
    L, K, T, N, P, M = obs.L, obs.K, obs.T, obs.N, obs.Tp, obs.M
    p1 = priors.pu[None, :]
    p0 = 1.0 - p1
    mm = linalg.outer(priors.mu)
    xp = obs.pilots[None, :, :, None]

    zz_mu = np.zeros((L, K, T, N), complex)
    zz_cov = np.zeros((L, K, T, N, N), complex)
    zz_mu[:, :, :P] = (p1[..., None] * priors.mu)[:, :, None] * xp
    pilot_cov = p1[..., None, None] * (priors.cov + mm * p0[..., None, None])
    zz_cov[:, :, :P] = pilot_cov[:, :, None] * (np.abs(xp) ** 2)[..., None]
    zz_cov[:, :, P:] = (p1[..., None, None] * (priors.cov + mm) * obs.sigma_x2)[:, :, None]

    if variant.bg:
        g_gamma, g_lam = priors.gamma, priors.lam
        a = np.log(priors.pu) - np.log1p(-priors.pu)
        g_kappa = _log_partition(g_gamma, g_lam) - a[None, :]
    else:
        g_gamma, g_lam = _natural(p1[..., None] * priors.mu, pilot_cov)
        g_kappa = np.zeros((L, K))

    unif_x = np.full((L, K, T - P, M), -np.log(M))
    unif_u = np.full((L, K, 2), -np.log(2.0))
    zeros_v = np.zeros((L, K, T, N), complex)
    zeros_m = np.zeros((L, K, T, N, N), complex)
    return MessageState(
        yz_mu=zeros_v.copy(),
        yz_cov=zeros_m.copy(),
        yz_gamma=zeros_v.copy(),
        yz_lam=zeros_m.copy(),
        zz_mu=zz_mu,
        zz_cov=linalg.herm(zz_cov),
        zx=unif_x,
        xz=unif_x.copy(),
        zg_kappa=np.zeros((L, K, T)),
        zg_gamma=zeros_v.copy(),
        zg_lam=zeros_m.copy(),
        gz_kappa=np.repeat(g_kappa[:, :, None], T, axis=2),
        gz_gamma=np.repeat(g_gamma[:, :, None], T, axis=2),
        gz_lam=np.repeat(g_lam[:, :, None], T, axis=2),
        gpsig_kappa=np.zeros((L, K)),
        gpsig_gamma=np.zeros((L, K, N), complex),
        gpsig_lam=np.zeros((L, K, N, N), complex),
        psigu=unif_u,
        upsig=unif_u.copy(),
        psigg_kappa=g_kappa.copy(),
        psigg_gamma=g_gamma.copy(),
        psigg_lam=g_lam.copy(),
    )


# --- the ten update steps -------------------------------------------------


def update_y_to_z(state, obs, priors, variant, eta):
    """Soft interference cancellation with the current z-beliefs of the other UEs."""
    tot_mu = state.zz_mu.sum(axis=1, keepdims=True)
    tot_cov = state.zz_cov.sum(axis=1, keepdims=True)
    state.yz_mu = obs.y[:, None] - (tot_mu - state.zz_mu)
    eye = np.eye(obs.N) * obs.sigma_n2
    state.yz_cov = linalg.herm(eye + (tot_cov - state.zz_cov))
    state.yz_gamma, state.yz_lam = _natural(state.yz_mu, state.yz_cov)


def _bg_split(state):
    """Log-weights of the active and inactive parts of the local z-belief under a BG g-message.

    The inactive part is a point mass at ``z = 0`` weighted by ``theta(0)``, the
    y->z message evaluated at zero; the active part still has to be multiplied
    by the per-symbol ``theta(x)``.
    """
    a = _log_partition(state.gz_gamma, state.gz_lam) - state.gz_kappa
    return _log_sigmoid(a), _log_sigmoid(-a) + _logpdf0(state.yz_mu, state.yz_cov)


def update_z_to_x(state, obs, priors, variant, eta):
    if obs.Td == 0:
        return
    P = obs.Tp
    gz_mu, gz_cov = _moments(state.gz_gamma, state.gz_lam)
    log_theta, _, _ = _data_components(state, obs, gz_mu, gz_cov)
    if variant.bg:
        # an inactive UE's z is 0 whatever x is, which flattens the message
        log_on, log_off = _bg_split(state)
        log_theta = np.logaddexp(log_theta + log_on[:, :, P:, None], log_off[:, :, P:, None])
    new = _normalize(log_theta)
    ok = _finite(new, ndim=3)
    new = _accept(ok, new, state.zx)
    state.zx = damp_categorical(state.zx, new, eta)
    _count(state, "z->x", state.zx.size // obs.M * (obs.M - 1))


def update_x_to_z(state, obs, priors, variant, eta):
    if obs.Td == 0:
        return
    total = state.zx.sum(axis=0, keepdims=True)
    state.xz = _normalize(total - state.zx)
    _count(state, "x->z", state.xz.size // obs.M * (obs.M - 1))


def update_z_to_g(state, obs, priors, variant, eta):
    P = obs.Tp
    gz_mu, gz_cov = _moments(state.gz_gamma, state.gz_lam)
    xp = obs.pilots[None, :, :, None]
    new_gamma = np.empty_like(state.zg_gamma)
    new_lam = np.empty_like(state.zg_lam)
    # pilot slots: the local belief has a single component, so the cavity cancels exactly
    new_gamma[:, :, :P] = state.yz_gamma[:, :, :P] * np.conj(xp)
    new_lam[:, :, :P] = state.yz_lam[:, :, :P] * (np.abs(xp) ** 2)[..., None]
    ok = np.ones(new_gamma.shape[:3], bool)
    log_ev = np.empty(new_gamma.shape[:3])
    if variant.bg:
        log_ev[:, :, :P] = _logpdf0(state.yz_mu[:, :, :P] - gz_mu[:, :, :P] * xp,
                                    state.yz_cov[:, :, :P] + gz_cov[:, :, :P] * (np.abs(xp) ** 2)[..., None])
    if obs.Td:
        x = obs.constellation
        log_theta, mu_t, cov_t = _data_components(state, obs, gz_mu, gz_cov)
        log_phi = state.xz + log_theta
        if variant.bg:
            # Gaussian part from the most likely symbol; the activity evidence sums over all symbols
            star = np.argmax(log_phi, axis=-1)
            xs = x[star][..., None]
            new_gamma[:, :, P:] = state.yz_gamma[:, :, P:] * np.conj(xs)
            new_lam[:, :, P:] = state.yz_lam[:, :, P:] * (np.abs(xs) ** 2)[..., None]
            log_ev[:, :, P:] = _logsumexp(log_phi)[..., 0]
        else:
            a2 = np.abs(x) ** 2
            mu_hat, cov_hat = _mixture(log_phi, mu_t / x[:, None], cov_t / a2[:, None, None])
            g_hat, l_hat = _natural(mu_hat, cov_hat)
            new_gamma[:, :, P:] = g_hat - state.gz_gamma[:, :, P:]
            new_lam[:, :, P:] = l_hat - state.gz_lam[:, :, P:]
            ok[:, :, P:] = linalg.is_pd(cov_hat)
    new_lam = linalg.herm(new_lam)
    new_kappa = state.zg_kappa
    if variant.bg:
        # local minus cavity activity log-odds: log sum_x phi(x) - log theta(0)
        log_theta0 = _logpdf0(state.yz_mu, state.yz_cov)
        a_loc = _log_partition(new_gamma + state.gz_gamma, new_lam + state.gz_lam)
        new_kappa = -(log_ev - log_theta0) + a_loc - _log_partition(state.gz_gamma, state.gz_lam)
    ok &= linalg.is_pd(new_lam) & _finite(new_gamma, new_lam, new_kappa, ndim=3)
    new = (_accept(ok, new_kappa, state.zg_kappa), _accept(ok, new_gamma, state.zg_gamma),
           _accept(ok, new_lam, state.zg_lam))
    old = (state.zg_kappa, state.zg_gamma, state.zg_lam)
    damped = _damp_natural(old, new, eta, variant.bg)
    state.zg_kappa, state.zg_gamma, state.zg_lam = (_accept(ok, d, o) for d, o in zip(damped, old))


def update_g_to_psig(state, obs, priors, variant, eta):
    state.gpsig_gamma = state.zg_gamma.sum(axis=2)
    state.gpsig_lam = linalg.herm(state.zg_lam.sum(axis=2))
    state.gpsig_kappa = state.zg_kappa.sum(axis=2) if variant.bg else np.zeros_like(state.gpsig_kappa)


def _vartheta(state, priors):
    """``log vartheta(0)``, ``log vartheta(1)`` and the propriety mask of ``m_{g->psig}``."""
    proper = linalg.is_pd(state.gpsig_lam)
    mu, cov = _moments(state.gpsig_gamma, state.gpsig_lam)
    lv0 = _logpdf0(mu, cov)
    lv1 = _logpdf0(mu - priors.mu, cov + priors.cov)
    return lv0, lv1, proper


def update_psig_to_u(state, obs, priors, variant, eta):
    lv0, lv1, proper = _vartheta(state, priors)
    if variant.bg:
        a = _log_partition(state.gpsig_gamma, state.gpsig_lam) - state.gpsig_kappa + lv1
        new = np.stack([_log_sigmoid(-a), _log_sigmoid(a)], axis=-1)
    else:
        new = _normalize(np.stack([lv0, lv1], axis=-1))
    ok = proper & _finite(new, ndim=2)
    new = _accept(ok, new, state.psigu)
    state.psigu = damp_categorical(state.psigu, new, eta)
    _count(state, "psig->u", state.psigu.size // 2)


def update_u_to_psig(state, obs, priors, variant, eta):
    total = state.psigu.sum(axis=0, keepdims=True)
    state.upsig = _normalize(priors.log_pu[None] + total - state.psigu)
    _count(state, "u->psig", state.upsig.size // 2)


def update_psig_to_g(state, obs, priors, variant, eta):
    a_u = state.upsig[..., 1] - state.upsig[..., 0]
    if variant.bg:
        # the projection is exact: activity from m_{u->psig}, Gaussian part equal to the prior
        new_gamma = np.broadcast_to(priors.gamma, state.psigg_gamma.shape).copy()
        new_lam = np.broadcast_to(priors.lam, state.psigg_lam.shape).copy()
        new_kappa = _log_partition(priors.gamma, priors.lam) - a_u
        ok = np.ones(a_u.shape, bool)
    else:
        lv0, lv1, proper = _vartheta(state, priors)
        w1 = np.clip(expit(a_u + lv1 - lv0), PROB_CLAMP, 1.0 - PROB_CLAMP)
        mu_a, cov_a = _moments(state.gpsig_gamma + priors.gamma, state.gpsig_lam + priors.lam)
        w = w1[..., None]
        mu = w * mu_a
        cov = w[..., None] * cov_a + (w * (1.0 - w))[..., None] * linalg.outer(mu_a)
        g_loc, l_loc = _natural(mu, linalg.herm(cov))
        new_gamma = g_loc - state.gpsig_gamma
        new_lam = linalg.herm(l_loc - state.gpsig_lam)
        new_kappa = state.psigg_kappa
        ok = proper & linalg.is_pd(new_lam) & _finite(new_gamma, new_lam, ndim=2)
    old = (state.psigg_kappa, state.psigg_gamma, state.psigg_lam)
    new = tuple(_accept(ok, n, o) for n, o in zip((new_kappa, new_gamma, new_lam), old))
    damped = _damp_natural(old, new, eta, variant.bg)
    state.psigg_kappa, state.psigg_gamma, state.psigg_lam = (_accept(ok, d, o) for d, o in zip(damped, old))


def update_g_to_z(state, obs, priors, variant, eta):
    tot_gamma = state.psigg_gamma[:, :, None] + state.zg_gamma.sum(axis=2, keepdims=True)
    tot_lam = state.psigg_lam[:, :, None] + state.zg_lam.sum(axis=2, keepdims=True)
    state.gz_gamma = tot_gamma - state.zg_gamma
    state.gz_lam = linalg.herm(tot_lam - state.zg_lam)
    if variant.bg:
        tot_kappa = state.psigg_kappa[:, :, None] + state.zg_kappa.sum(axis=2, keepdims=True)
        state.gz_kappa = tot_kappa - state.zg_kappa


def _pilot_components(state, obs, gz_mu, gz_cov):
    """Pilot-slot counterpart of :func:`_data_components` with a single symbol."""
    P = obs.Tp
    xp = obs.pilots[None, :, :, None]
    a2 = np.abs(xp) ** 2
    log_theta = _logpdf0(state.yz_mu[:, :, :P] - gz_mu[:, :, :P] * xp,
                         state.yz_cov[:, :, :P] + gz_cov[:, :, :P] * a2[..., None])
    lam_t = state.yz_lam[:, :, :P] + state.gz_lam[:, :, :P] / a2[..., None]
    gam_t = state.yz_gamma[:, :, :P] + state.gz_gamma[:, :, :P] * (xp / a2)
    mu_t, cov_t = _moments(gam_t, lam_t)
    return log_theta[..., None], mu_t[..., None, :], cov_t[..., None, :, :]


def _with_atom(logw, mu, cov, log_atom):
    """Append a point mass at zero with log-weight ``log_atom`` to a mixture."""
    logw = np.concatenate([logw, log_atom[..., None]], axis=-1)
    mu = np.concatenate([mu, np.zeros_like(mu[..., :1, :])], axis=-2)
    cov = np.concatenate([cov, np.zeros_like(cov[..., :1, :, :])], axis=-3)
    return logw, mu, cov


def update_z_to_z(state, obs, priors, variant, eta):
    P = obs.Tp
    gz_mu, gz_cov = _moments(state.gz_gamma, state.gz_lam)
    new_mu = np.empty_like(state.zz_mu)
    new_cov = np.empty_like(state.zz_cov)
    ok = np.ones(new_mu.shape[:3], bool)
    if variant.bg:
        # z = g x with a BG g: the inactive event contributes a point mass at z = 0
        log_on, log_off = _bg_split(state)
    parts = []
    if P:
        if variant.bg:
            lt, mu_t, cov_t = _pilot_components(state, obs, gz_mu, gz_cov)
            parts.append((slice(0, P), *_with_atom(lt + log_on[:, :, :P, None], mu_t, cov_t, log_off[:, :, :P])))
        else:
            # pilot slots: single component, dividing by m_{y->z} leaves the scaled g-message
            xp = obs.pilots[None, :, :, None]
            new_mu[:, :, :P] = gz_mu[:, :, :P] * xp
            new_cov[:, :, :P] = gz_cov[:, :, :P] * (np.abs(xp) ** 2)[..., None]
            ok[:, :, :P] = linalg.is_pd(new_cov[:, :, :P]) & _finite(new_mu[:, :, :P], new_cov[:, :, :P], ndim=3)
    if obs.Td:
        log_theta, mu_t, cov_t = _data_components(state, obs, gz_mu, gz_cov)
        logw = state.xz + log_theta
        if variant.bg:
            parts.append((slice(P, None), *_with_atom(logw + log_on[:, :, P:, None], mu_t, cov_t, log_off[:, :, P:])))
        else:
            parts.append((slice(P, None), logw, mu_t, cov_t))
    # a message carrying more energy than an active UE's z is a division artifact
    bound = obs.sigma_x2 * np.real(np.trace(priors.cov + linalg.outer(priors.mu), axis1=-2, axis2=-1))
    for sl, logw, mu_c, cov_c in parts:
        mu_hat, cov_hat = _mixture(logw, mu_c, cov_c)
        g_hat, l_hat = _natural(mu_hat, cov_hat)
        lam = linalg.herm(l_hat - state.yz_lam[:, :, sl])
        mu, cov = _moments(g_hat - state.yz_gamma[:, :, sl], lam)
        new_mu[:, :, sl] = mu
        new_cov[:, :, sl] = cov
        energy = np.real(np.trace(cov + linalg.outer(mu), axis1=-2, axis2=-1))
        ok[:, :, sl] = (linalg.is_pd(cov_hat) & linalg.is_pd(lam) & _finite(mu, cov, ndim=3)
                        & (energy <= ZZ_ENERGY_MARGIN * bound[:, :, None]))
    new_mu = _accept(ok, new_mu, state.zz_mu)
    new_cov = _accept(ok, new_cov, state.zz_cov)
    state.zz_mu, zz_cov = damp_gaussian(state.zz_mu, state.zz_cov, new_mu, new_cov, eta)
    state.zz_cov = linalg.herm(zz_cov)


UPDATES = {
    "y->z": update_y_to_z,
    "z->x": update_z_to_x,
    "x->z": update_x_to_z,
    "z->g": update_z_to_g,
    "g->psig": update_g_to_psig,
    "psig->u": update_psig_to_u,
    "u->psig": update_u_to_psig,
    "psig->g": update_psig_to_g,
    "g->z": update_g_to_z,
    "z->z": update_z_to_z,
}

#: Messages that cross the AP/CPU boundary.
BOUNDARY_EDGES = ("z->x", "x->z", "psig->u", "u->psig")

Observer = Callable[[int, str, MessageState], None]


def iterate(state, obs, priors, variant, eta, iteration=0, observer: Optional[Observer] = None):
    """One full pass of the schedule; returns the boundary count of this pass."""
    state.fronthaul = {}
    for step in STEPS:
        UPDATES[step](state, obs, priors, variant, eta)
        if observer is not None:
            observer(iteration, step, state)
    return sum(state.fronthaul.get(e, 0) for e in BOUNDARY_EDGES)


# --- final estimates ------------------------------------------------------


def finalize(state, obs, priors, rng=None) -> Estimates:
    """MAP decisions from the products of incoming messages.

    Ties go to ``u = 0`` and to the lowest constellation index. When ``rng``
    is given, UEs declared inactive get uniformly random symbols.
    """
    log_u = priors.log_pu + state.psigu.sum(axis=0)
    a = log_u[:, 1] - log_u[:, 0]
    u_hat = (a > 0).astype(np.int64)
    soft_u = expit(a)

    gamma = priors.gamma + state.gpsig_gamma
    lam = linalg.herm(priors.lam + state.gpsig_lam)
    mu, _ = _moments(gamma, lam)
    ok = linalg.is_pd(lam) & _finite(mu, ndim=2)
    h_hat = _accept(ok, mu, priors.mu)

    log_x = state.zx.sum(axis=0)
    soft_x = np.exp(_normalize(log_x))
    x_idx = np.argmax(log_x, axis=-1) if obs.Td else np.zeros((obs.K, 0), np.int64)
    if rng is not None and obs.Td:
        random_idx = rng.integers(0, obs.M, size=x_idx.shape)
        x_idx = np.where(u_hat[:, None] == 1, x_idx, random_idx)
    return Estimates(
        u_hat=u_hat,
        soft_u=soft_u,
        h_hat=h_hat,
        x_idx=x_idx,
        x_hat=obs.constellation[x_idx],
        soft_x=soft_x,
        g_hat=h_hat * u_hat[None, :, None],
    )


def run(obs: Observation, priors: Priors, variant: Variant, cfg: EngineConfig = EngineConfig(),
        rng=None, observer: Optional[Observer] = None, i_max: Optional[int] = None):
    """Run the schedule ``i_max`` times and return ``(Estimates, MessageState)``."""
    variant = Variant(variant)
    state = init_messages(priors, obs, variant)
    counts = []
    for i in range(cfg.i_max if i_max is None else i_max):
        counts.append(iterate(state, obs, priors, variant, cfg.eta, i, observer))
    est = finalize(state, obs, priors, rng)
    est.fronthaul = counts
    return est, state


def jac_ep_initialize(obs: Observation, priors: Priors, cfg: EngineConfig = EngineConfig(),
                      variant: Variant = Variant.JACD_EP_BG) -> Priors:
    """Pilot-only activity and channel estimates used as priors for the data-aided run.

    This is the BG machinery on the pilot slots alone (no data factors). Its
    activity posteriors become ``pu``; the channel posterior given activity,
    ``CN(lam_hat^{-1} gamma_hat, lam_hat^{-1})``, becomes the channel prior.
    Entries that come out non-finite or improper fall back to ``priors``.
    """
    if obs.Tp < 1:
        raise ValueError("the pilot-only initializer needs at least one pilot slot")
    pobs = obs.pilot_part()
    est, state = run(pobs, priors, variant, cfg, i_max=cfg.init_iters)
    pu = np.where(np.isfinite(est.soft_u), est.soft_u, priors.pu)
    lam = linalg.herm(priors.lam + state.gpsig_lam)
    mu, cov = _moments(priors.gamma + state.gpsig_gamma, lam)
    ok = linalg.is_pd(lam) & linalg.is_pd(cov) & _finite(mu, cov, ndim=2)
    return Priors(pu, _accept(ok, mu, priors.mu), _accept(ok, cov, priors.cov))


def jac_ep_estimates(post: Priors, obs: Observation) -> Estimates:
    """Hard decisions of the pilot-only stage: threshold at 1/2 and channel means."""
    u_hat = (post.pu > 0.5).astype(np.int64)
    empty = np.zeros((obs.K, 0), np.int64)
    return Estimates(u_hat, post.pu.copy(), post.mu.copy(), empty, obs.constellation[empty],
                     np.zeros((obs.K, 0, obs.M)), post.mu * u_hat[None, :, None])


# --- trace ----------------------------------------------------------------


def _jsonable(a):
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return np.stack([a.real, a.imag], axis=-1).tolist()
    return a.tolist()


_EDGE_FIELDS = {
    "y->z": ("yz_mu", "yz_cov"),
    "z->x": ("zx",),
    "x->z": ("xz",),
    "z->g": ("zg_kappa", "zg_gamma", "zg_lam"),
    "g->psig": ("gpsig_kappa", "gpsig_gamma", "gpsig_lam"),
    "psig->u": ("psigu",),
    "u->psig": ("upsig",),
    "psig->g": ("psigg_kappa", "psigg_gamma", "psigg_lam"),
    "g->z": ("gz_kappa", "gz_gamma", "gz_lam"),
    "z->z": ("zz_mu", "zz_cov"),
}


class JsonlTrace:
    """Observer writing one JSON line per update step with the updated message parameters."""

    def __init__(self, fh, label=None):
        self.fh = fh
        self.label = label

    def __call__(self, iteration, step, state):
        rec = {"iteration": iteration, "edge": step}
        if self.label is not None:
            rec["label"] = self.label
        rec.update({name: _jsonable(getattr(state, name)) for name in _EDGE_FIELDS[step]})
        self.fh.write(json.dumps(rec) + "\n")

