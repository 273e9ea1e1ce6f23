"""Centralized linear baselines: MMSE channel estimation and LMMSE MIMO detection."""

import enum

import numpy as np


class GenieMode(enum.Enum):
    NONE = "none"
    PERFECT_ACTIVITY = "perfect-activity"
    PERFECT_ACTIVITY_AND_CHANNEL = "perfect-activity-and-channel"
    #: Known data symbols; applies to channel estimation only.
    PERFECT_DATA = "perfect-data"


def mmse_channel_estimate(y, X, corr, active, sigma_n2):
    """Linear MMSE estimate of the effective channels from known-symbol slots.

    ``y`` has shape ``(L, N, Tk)`` and ``X`` shape ``(K, Tk)`` holds the known
    symbols of those slots. Channels of active UEs have the prior
    ``CN(0, corr[l, k])``; inactive UEs contribute nothing and get a zero
    estimate. Returns ``G_hat`` with shape ``(L, K, N)``.

    Per AP, ``Y_l = H_l X + N_l`` so the posterior precision of ``vec(H_l)`` is
    ``blockdiag(R_lk^-1) + conj(X) X^T kron I / sigma_n2``.
    """
    y = np.asarray(y)
    X = np.asarray(X)
    L, N, Tk = y.shape
    K = X.shape[0]
    if Tk < 1:
        raise ValueError("at least one known-symbol slot is required")
    G_hat = np.zeros((L, K, N), complex)
    idx = np.flatnonzero(np.asarray(active) == 1)
    if idx.size == 0:
        return G_hat
    Xa = X[idx]
    Ka = idx.size
    R = np.asarray(corr)[:, idx]  # (L, Ka, N, N)
    prec = np.zeros((L, Ka, N, Ka, N), complex)
    gram = np.conj(Xa) @ Xa.T / sigma_n2  # (Ka, Ka)
    prec += gram[None, :, None, :, None] * np.eye(N)[None, None, :, None, :]
    Rinv = np.linalg.inv(R)
    for j in range(Ka):
        prec[:, j, :, j, :] += Rinv[:, j]
    b = np.einsum("lnt,kt->lkn", y, np.conj(Xa)) / sigma_n2
    sol = np.linalg.solve(prec.reshape(L, Ka * N, Ka * N), b.reshape(L, Ka * N, 1))
    G_hat[:, idx] = sol.reshape(L, Ka, N)
    return G_hat


def lmmse_detect(G_hat, Yd, sigma_n2, sigma_x2, constellation, active, rng=None):
    """Centralized LMMSE detection with nearest-point decisions.

    ``G_hat`` has shape ``(L, K, N)`` and ``Yd`` shape ``(L, N, Td)``; all
    ``L N`` receive dimensions are stacked. Only UEs in ``active`` are
    detected. The others get uniformly random symbols when ``rng`` is given,
    and index 0 otherwise. Returns constellation indices ``(K, Td)``.
    """
    G_hat = np.asarray(G_hat)
    L, K, N = G_hat.shape
    Td = Yd.shape[-1]
    x_idx = rng.integers(0, len(constellation), size=(K, Td)) if rng is not None else np.zeros((K, Td), np.int64)
    idx = np.flatnonzero(np.asarray(active) == 1)
    if idx.size == 0 or Td == 0:
        return x_idx
    A = np.transpose(G_hat[:, idx], (0, 2, 1)).reshape(L * N, idx.size)
    Y = np.asarray(Yd).reshape(L * N, Td)
    W = A.conj().T @ A + (sigma_n2 / sigma_x2) * np.eye(idx.size)
    x_soft = np.linalg.solve(W, A.conj().T @ Y)
    x_idx[idx] = nearest_symbol(x_soft, constellation)
    return x_idx


def nearest_symbol(x, constellation):
    """Index of the closest constellation point, lowest index on ties."""
    d = np.abs(np.asarray(x)[..., None] - np.asarray(constellation)) ** 2
    return np.argmin(d, axis=-1)
