"""Batched helpers for small dense Hermitian matrices.

Vectors have shape ``(..., N)`` and matrices ``(..., N, N)``. The ``N == 1``
case is handled with plain elementwise arithmetic, which is what the
full-scale simulations (N = 1) run on and is an order of magnitude faster than
going through the batched LAPACK wrappers.
"""

import numpy as np

LOG_PI = float(np.log(np.pi))


def herm(a):
    """Project onto the Hermitian matrices by averaging with the conjugate transpose."""
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def eye_like(a):
    n = a.shape[-1]
    return np.broadcast_to(np.eye(n, dtype=a.dtype), a.shape)


def inv(a):
    if a.shape[-1] == 1:
        return 1.0 / a
    return np.linalg.inv(a)


def matvec(a, v):
    if a.shape[-1] == 1:
        return a[..., 0] * v
    return np.einsum("...ij,...j->...i", a, v)


def outer(u, v=None):
    """``u v^H`` batched."""
    v = u if v is None else v
    return u[..., :, None] * np.conj(v[..., None, :])


def quad(a, v):
    """Real part of ``v^H a v``."""
    if a.shape[-1] == 1:
        return np.real(a[..., 0, 0]) * np.abs(v[..., 0]) ** 2
    return np.real(np.einsum("...i,...ij,...j->...", np.conj(v), a, v))


def logdet(a):
    """Log-determinant of Hermitian positive definite matrices (real)."""
    if a.shape[-1] == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(np.real(a[..., 0, 0]))
    sign, ld = np.linalg.slogdet(a)
    return np.where(np.real(sign) > 0, ld, np.nan)


def is_pd(a, rtol=1e-13):
    """Elementwise test for Hermitian positive definiteness over the batch."""
    if a.shape[-1] == 1:
        d = np.real(a[..., 0, 0])
        return np.isfinite(d) & (d > 0)
    finite = np.all(np.isfinite(a), axis=(-1, -2))
    safe = np.where(finite[..., None, None], a, 0.0)
    w = np.linalg.eigvalsh(herm(safe))
    scale = np.max(np.abs(w), axis=-1)
    return finite & (w[..., 0] > rtol * scale) & (scale > 0)


def cn_logpdf(x, mu, cov):
    """Log of the proper complex Gaussian density ``CN(x | mu, cov)``."""
    n = cov.shape[-1]
    d = x - mu
    return -n * LOG_PI - logdet(cov) - quad(inv(cov), d)


def cn_logpdf_zero(mu, cov):
    """``log CN(0 | mu, cov)``; the ubiquitous likelihood term of the message updates."""
    return cn_logpdf(np.zeros_like(mu), mu, cov)


def log_partition(gamma, lam):
    """Gaussian log-partition ``gamma^H lam^{-1} gamma - log|lam / pi|``."""
    n = lam.shape[-1]
    return quad(inv(lam), gamma) - logdet(lam) + n * LOG_PI


def to_moment(gamma, lam):
    cov = herm(inv(lam))
    return matvec(cov, gamma), cov


def to_natural(mu, cov):
    lam = herm(inv(cov))
    return matvec(lam, mu), lam
