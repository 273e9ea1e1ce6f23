"""Network scenarios and block realizations of the grant-free cell-free uplink.

The received signal at AP ``l`` over a coherence block of ``T`` channel uses is

    Y_l = sum_k h_lk u_k x_k^T + N_l,

with ``u_k ~ Bernoulli(lam)``, ``h_lk ~ CN(0, Xi_lk)`` and white noise of power
``sigma_n2``. All powers are linear mW internally; dBm only appears in
:class:`NetworkConfig`.
"""

import itertools
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from . import linalg

AP_HEIGHT_M = 10.0
PATHLOSS_INTERCEPT_DB = -30.5
PATHLOSS_SLOPE = 36.7
SHADOW_STD_DB = 4.0
SHADOW_DECORR_M = 9.0


class GeometryError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def dbm_to_mw(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)


@dataclass(frozen=True)
class NetworkConfig:
    L: int = 25
    N: int = 1
    K: int = 40
    lam: float = 0.3
    T: int = 60
    Tp: int = 6
    sigma_x2_dbm: float = 16.0
    sigma_n2_dbm: float = -96.0
    area_m: float = 500.0
    M: int = 4
    ap_layout: str = "grid"

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self):
        errors = []
        for name in ("L", "N", "K", "T", "Tp", "M"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if not 0.0 < self.lam < 1.0:
            errors.append("lam must lie in (0, 1)")
        if self.Tp > self.T:
            errors.append("Tp must not exceed T")
        if self.Tp > self.K:
            errors.append("Tp must not exceed K")
        if self.M != 4:
            errors.append("only 4-QAM (M=4) is supported")
        if self.ap_layout not in ("grid", "center"):
            errors.append("ap_layout must be 'grid' or 'center'")
        return errors

    @property
    def Td(self) -> int:
        return self.T - self.Tp

    @property
    def sigma_x2(self) -> float:
        return float(dbm_to_mw(self.sigma_x2_dbm))

    @property
    def sigma_n2(self) -> float:
        return float(dbm_to_mw(self.sigma_n2_dbm))

    def with_(self, **kw) -> "NetworkConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class Geometry:
    ap_positions: np.ndarray  # (L, 3)
    ue_positions: np.ndarray  # (K, 2)

    def distances(self) -> np.ndarray:
        """3-D AP-UE distances ``(L, K)`` with UEs on the ground."""
        ue3 = np.concatenate([self.ue_positions, np.zeros((len(self.ue_positions), 1))], axis=1)
        return np.linalg.norm(self.ap_positions[:, None, :] - ue3[None, :, :], axis=-1)


@dataclass(frozen=True)
class Scenario:
    """One network drop: geometry, large-scale gains, pilots and constellation."""

    geometry: Geometry
    xi: np.ndarray  # (L, K) linear power gains
    pilots: np.ndarray  # (K, Tp)
    constellation: np.ndarray  # (M,)
    sigma_x2: float
    sigma_n2: float
    lam: float
    corr: Optional[np.ndarray] = None  # (L, K, N, N) or None for xi * I
    N: int = 1
    pilot_coherence: float = field(default=float("nan"))

    @property
    def L(self) -> int:
        return self.xi.shape[0]

    @property
    def K(self) -> int:
        return self.xi.shape[1]

    @property
    def Tp(self) -> int:
        return self.pilots.shape[1]

    def correlation(self) -> np.ndarray:
        """Spatial correlation ``Xi_lk`` for every pair, shape ``(L, K, N, N)``."""
        if self.corr is not None:
            return self.corr
        return self.xi[..., None, None] * np.eye(self.N)

    def with_pilots(self, pilots: np.ndarray, coherence: float = float("nan")) -> "Scenario":
        return replace(self, pilots=pilots, pilot_coherence=coherence)


@dataclass(frozen=True)
class Realization:
    u: np.ndarray  # (K,) int
    H: np.ndarray  # (L, K, N)
    X: np.ndarray  # (K, T) pilots followed by data
    Y: np.ndarray  # (L, N, T)
    seed: int
    data_idx: np.ndarray  # (K, Td) constellation indices

    @property
    def Xd(self) -> np.ndarray:
        return self.X[:, self.X.shape[1] - self.data_idx.shape[1]:]

    @property
    def G(self) -> np.ndarray:
        """Effective channels ``g_lk = h_lk u_k``, shape ``(L, K, N)``."""
        return self.H * self.u[None, :, None]


# --- geometry and large-scale fading -------------------------------------


def build_geometry(cfg: NetworkConfig, rng) -> Geometry:
    """AP grid at height 10 m and UEs uniform over the square area."""
    if cfg.ap_layout == "center" or cfg.L == 1:
        aps = np.array([[cfg.area_m / 2, cfg.area_m / 2, AP_HEIGHT_M]] * cfg.L)
    else:
        side = math.isqrt(cfg.L)
        if side * side != cfg.L:
            raise GeometryError(f"L={cfg.L} is not a perfect square; grid layout impossible")
        pitch = cfg.area_m / side
        coords = pitch / 2 + pitch * np.arange(side)
        aps = np.array([[x, y, AP_HEIGHT_M] for x in coords for y in coords])
    ues = rng.uniform(0.0, cfg.area_m, size=(cfg.K, 2))
    return Geometry(aps, ues)


def pathloss_db(d):
    d = np.maximum(np.asarray(d, dtype=float), 1.0)
    return PATHLOSS_INTERCEPT_DB - PATHLOSS_SLOPE * np.log10(d)


def shadowing(geometry: Geometry, rng) -> np.ndarray:
    """Shadow fading in dB, shape ``(L, K)``.

    Per AP the UE shadowing values are jointly Gaussian with correlation
    ``2 ** (-d_kk' / 9 m)``; different APs are independent.
    """
    ue = geometry.ue_positions
    d_ue = np.linalg.norm(ue[:, None, :] - ue[None, :, :], axis=-1)
    R = SHADOW_STD_DB**2 * 2.0 ** (-d_ue / SHADOW_DECORR_M)
    w, V = np.linalg.eigh(R)
    root = V * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((len(geometry.ap_positions), len(ue)))
    return z @ root.T


def large_scale(cfg: NetworkConfig, geometry: Geometry, rng) -> np.ndarray:
    """Large-scale gains ``xi_lk`` (linear) from pathloss plus correlated shadowing."""
    f = shadowing(geometry, rng)
    return 10.0 ** ((pathloss_db(geometry.distances()) + f) / 10.0)


# --- constellation and pilots --------------------------------------------


def qam4(sigma_x2: float) -> np.ndarray:
    """Gray-mapped 4-QAM with mean power ``sigma_x2``; index bits (b0, b1) -> signs."""
    a = math.sqrt(sigma_x2 / 2.0)
    return a * np.array([1 + 1j, -1 + 1j, 1 - 1j, -1 - 1j])


@dataclass(frozen=True)
class PilotDesign:
    columns: tuple
    coherence: float
    exhaustive: bool
    pilots: np.ndarray = field(repr=False)


def _difference_sums(K, cols):
    """|sum_s exp(2 pi i d s / K)| for d = 1..K//2, one row per column set."""
    d = np.arange(1, K // 2 + 1)
    phase = np.exp(2j * np.pi * np.outer(np.arange(K), d) / K)  # (K, D)
    return np.abs(phase[cols].sum(axis=-2))


def coherence(pilots: np.ndarray) -> float:
    """Largest normalized inner product between distinct pilot rows."""
    p = pilots / np.linalg.norm(pilots, axis=1, keepdims=True)
    g = np.abs(p @ p.conj().T)
    np.fill_diagonal(g, 0.0)
    return float(g.max()) if len(p) > 1 else 0.0


@lru_cache(maxsize=None)
def _search_columns(K: int, Tp: int, budget: int):
    """Column subset of the K-point DFT minimizing the mutual coherence.

    Row inner products of a column-restricted DFT depend only on the index
    difference ``d = k - k'``, so the coherence of a subset is
    ``max_d |sum_s w^{d s}| / Tp``. Cyclic shifts of a subset leave it unchanged,
    which lets the search fix column 0; the lexicographically smallest optimal
    subset always contains 0.
    """
    if Tp == K:
        return tuple(range(K)), 0.0, True
    if Tp == 1:
        return (0,), 1.0, True
    n_sets = math.comb(K - 1, Tp - 1)
    if n_sets > budget:
        return _greedy_columns(K, Tp) + (False,)
    best_val, best_cols = np.inf, None
    it = itertools.combinations(range(1, K), Tp - 1)
    chunk = 200_000
    while True:
        flat = np.fromiter(itertools.chain.from_iterable(itertools.islice(it, chunk)), dtype=np.int64)
        if flat.size == 0:
            break
        rest = flat.reshape(-1, Tp - 1)
        cols = np.concatenate([np.zeros((len(rest), 1), np.int64), rest], axis=1)
        val = _difference_sums(K, cols).max(axis=1)
        # combinations() is lexicographic, so the first near-minimum wins ties
        i = int(np.flatnonzero(val <= val.min() + 1e-9)[0])
        if val[i] < best_val - 1e-9:
            best_val, best_cols = float(val[i]), tuple(int(c) for c in cols[i])
    return best_cols, best_val / Tp, True


def _greedy_columns(K, Tp):
    cols = [0]
    while len(cols) < Tp:
        cands = [c for c in range(K) if c not in cols]
        vals = [_difference_sums(K, np.array(cols + [c])).max() for c in cands]
        cols.append(cands[int(np.argmin(vals))])
    cols = tuple(sorted(cols))
    return cols, float(_difference_sums(K, np.array(cols)).max()) / Tp


def design_pilots(K: int, Tp: int, sigma_x2: float, budget: int = 20_000_000) -> PilotDesign:
    """DFT-column pilots with minimal mutual coherence, entries of magnitude ``sqrt(sigma_x2)``."""
    if not 1 <= Tp <= K:
        raise ConfigError(f"need 1 <= Tp <= K, got Tp={Tp}, K={K}")
    cols, coh, exhaustive = _search_columns(K, Tp, budget)
    if not exhaustive:
        warnings.warn(f"pilot search over C({K - 1},{Tp - 1}) subsets exceeds budget; using greedy")
    k = np.arange(K)[:, None]
    pilots = math.sqrt(sigma_x2) * np.exp(-2j * np.pi * k * np.array(cols)[None, :] / K)
    return PilotDesign(cols, coh, exhaustive, pilots)


# --- scenarios and realizations ------------------------------------------


def build_scenario(cfg: NetworkConfig, rng, pilots: Optional[PilotDesign] = None, corr=None) -> Scenario:
    geometry = build_geometry(cfg, rng)
    xi = large_scale(cfg, geometry, rng)
    if pilots is None:
        pilots = design_pilots(cfg.K, cfg.Tp, cfg.sigma_x2)
    if corr is not None:
        corr = np.asarray(corr, dtype=complex)
        trace = np.real(np.trace(corr, axis1=-2, axis2=-1)) / cfg.N
        if corr.shape != (cfg.L, cfg.K, cfg.N, cfg.N) or not np.allclose(trace, xi, rtol=1e-9):
            raise ConfigError("correlation matrices must be (L, K, N, N) with tr/N equal to xi")
    return Scenario(
        geometry=geometry,
        xi=xi,
        pilots=pilots.pilots,
        constellation=qam4(cfg.sigma_x2),
        sigma_x2=cfg.sigma_x2,
        sigma_n2=cfg.sigma_n2,
        lam=cfg.lam,
        corr=corr,
        N=cfg.N,
        pilot_coherence=pilots.coherence,
    )


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _sqrtm_psd(a):
    w, V = np.linalg.eigh(a)
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def channel_noise(scenario: Scenario, seed: int, T: int):
    """Regenerate ``(u, H, data_idx, noise)`` from a realization seed."""
    r_u, r_h, r_x, r_n = _streams(seed)
    L, K, N = scenario.L, scenario.K, scenario.N
    u = (r_u.random(K) < scenario.lam).astype(np.int64)
    w = (r_h.standard_normal((L, K, N)) + 1j * r_h.standard_normal((L, K, N))) / math.sqrt(2)
    H = linalg.matvec(_sqrtm_psd(scenario.correlation()), w)
    data_idx = r_x.integers(0, len(scenario.constellation), size=(K, T - scenario.Tp))
    noise = math.sqrt(scenario.sigma_n2 / 2) * (
        r_n.standard_normal((L, N, T)) + 1j * r_n.standard_normal((L, N, T))
    )
    return u, H, data_idx, noise


def received(H, u, X, noise):
    """``Y_l = H_l U X + N_l`` for all APs at once, shape ``(L, N, T)``."""
    return np.einsum("lkn,kt->lnt", H * u[None, :, None], X) + noise


def draw_realization(cfg: NetworkConfig, scenario: Scenario, rng) -> Realization:
    seed = int(rng.integers(0, 2**63 - 1))
    return realization_from_seed(cfg, scenario, seed)


def realization_from_seed(cfg: NetworkConfig, scenario: Scenario, seed: int) -> Realization:
    u, H, data_idx, noise = channel_noise(scenario, seed, cfg.T)
    X = np.concatenate([scenario.pilots, scenario.constellation[data_idx]], axis=1)
    return Realization(u=u, H=H, X=X, Y=received(H, u, X, noise), seed=seed, data_idx=data_idx)


# --- JSON layout ----------------------------------------------------------


def _enc(a):
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return np.stack([a.real, a.imag], axis=-1).tolist()
    return a.tolist()


def _dec(v, cplx=True):
    a = np.asarray(v, dtype=float)
    return a[..., 0] + 1j * a[..., 1] if cplx else a


def scenario_to_json(s: Scenario) -> dict:
    return {
        "ap_positions": _enc(s.geometry.ap_positions),
        "ue_positions": _enc(s.geometry.ue_positions),
        "xi": _enc(s.xi),
        "pilots": _enc(s.pilots),
        "constellation": _enc(s.constellation),
        "sigma_x2": s.sigma_x2,
        "sigma_n2": s.sigma_n2,
        "lam": s.lam,
        "N": s.N,
        "corr": None if s.corr is None else _enc(s.corr),
        "pilot_coherence": s.pilot_coherence,
    }


def scenario_from_json(d: dict) -> Scenario:
    return Scenario(
        geometry=Geometry(_dec(d["ap_positions"], False), _dec(d["ue_positions"], False)),
        xi=_dec(d["xi"], False),
        pilots=_dec(d["pilots"]),
        constellation=_dec(d["constellation"]),
        sigma_x2=d["sigma_x2"],
        sigma_n2=d["sigma_n2"],
        lam=d["lam"],
        corr=None if d["corr"] is None else _dec(d["corr"]),
        N=d["N"],
        pilot_coherence=d["pilot_coherence"],
    )


def realization_to_json(r: Realization) -> dict:
    return {
        "u": _enc(r.u),
        "H": _enc(r.H),
        "X": _enc(r.X),
        "Y": _enc(r.Y),
        "seed": r.seed,
        "data_idx": _enc(r.data_idx),
    }


def realization_from_json(d: dict) -> Realization:
    return Realization(
        u=np.asarray(d["u"], dtype=np.int64),
        H=_dec(d["H"]),
        X=_dec(d["X"]),
        Y=_dec(d["Y"]),
        seed=int(d["seed"]),
        data_idx=np.asarray(d["data_idx"], dtype=np.int64),
    )


def config_to_json(cfg: NetworkConfig) -> dict:
    return asdict(cfg)
