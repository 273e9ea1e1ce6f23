"""Detection, estimation and symbol error metrics.

Network-wide metrics are ratios of sums over trials (ratio of expectations),
so they merge associatively across workers. Undefined values (no energy, no
active UE) are reported as NaN.
"""

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

METRICS = ("der", "nmse", "ser")


@dataclass(frozen=True)
class TrialOutcome:
    """Ground truth and estimates of one block.

    ``G`` and ``G_hat`` have shape ``(L, K, N)``; ``x_idx`` and ``x_hat_idx``
    hold constellation indices with shape ``(K, Td)``.
    """

    u: np.ndarray
    u_hat: np.ndarray
    G: np.ndarray
    G_hat: np.ndarray
    x_idx: np.ndarray
    x_hat_idx: np.ndarray
    drop: int = 0
    trial: int = 0

    def counts(self) -> dict:
        """Numerators and denominators of the three metrics for this trial."""
        act = np.asarray(self.u) == 1
        return {
            "der": (float(np.sum(self.u != self.u_hat)), float(len(self.u))),
            "nmse": (float(np.sum(np.abs(self.G - self.G_hat) ** 2)), float(np.sum(np.abs(self.G) ** 2))),
            "ser": (float(np.sum(self.x_idx[act] != self.x_hat_idx[act])), float(np.sum(act) * self.x_idx.shape[1])),
        }


def _ratio(num, den):
    return num / den if den > 0 else float("nan")


def der(outcomes: Sequence[TrialOutcome]) -> float:
    """Mean fraction of UEs whose activity is misdetected."""
    c = [o.counts()["der"] for o in outcomes]
    return _ratio(sum(n for n, _ in c), sum(d for _, d in c))


def nmse(outcomes: Sequence[TrialOutcome]) -> float:
    """Summed squared error of the effective channel over summed channel energy."""
    c = [o.counts()["nmse"] for o in outcomes]
    return _ratio(sum(n for n, _ in c), sum(d for _, d in c))


def ser(outcomes: Sequence[TrialOutcome]) -> float:
    """Symbol error rate over the truly active UEs."""
    c = [o.counts()["ser"] for o in outcomes]
    return _ratio(sum(n for n, _ in c), sum(d for _, d in c))


@dataclass
class Accumulator:
    """Running sums for the network-wide metrics; ``merge`` is associative."""

    num: dict = field(default_factory=lambda: {m: 0.0 for m in METRICS})
    den: dict = field(default_factory=lambda: {m: 0.0 for m in METRICS})
    per_trial: dict = field(default_factory=lambda: {m: [] for m in METRICS})
    trials: int = 0

    def add(self, outcome: TrialOutcome) -> None:
        self.add_counts(outcome.counts())

    def add_counts(self, counts: dict) -> None:
        """Add one trial given as ``{metric: (numerator, denominator)}``."""
        for m, (n, d) in counts.items():
            self.num[m] += n
            self.den[m] += d
            self.per_trial[m].append((n, d))
        self.trials += 1

    def merge(self, other: "Accumulator") -> "Accumulator":
        out = Accumulator()
        for m in METRICS:
            out.num[m] = self.num[m] + other.num[m]
            out.den[m] = self.den[m] + other.den[m]
            out.per_trial[m] = self.per_trial[m] + other.per_trial[m]
        out.trials = self.trials + other.trials
        return out

    def value(self, metric: str) -> float:
        return _ratio(self.num[metric], self.den[metric])

    def stderr(self, metric: str) -> float:
        """Standard error of the ratio estimator, by linearization over trials."""
        pairs = np.array(self.per_trial[metric], dtype=float).reshape(-1, 2)
        n = len(pairs)
        if n < 2 or pairs[:, 1].sum() <= 0:
            return float("nan")
        r = pairs[:, 0].sum() / pairs[:, 1].sum()
        resid = pairs[:, 0] - r * pairs[:, 1]
        return float(np.sqrt(np.var(resid, ddof=1) / n) / pairs[:, 1].mean())


# --- per-UE statistics -----------------------------------------------------


def per_ue_counts(outcome: TrialOutcome) -> dict:
    """Per-UE error and energy sums of one trial, each of shape ``(K,)``."""
    act = (np.asarray(outcome.u) == 1).astype(float)
    return {
        "der_err": (outcome.u != outcome.u_hat).astype(float),
        "sq_err": np.sum(np.abs(outcome.G - outcome.G_hat) ** 2, axis=(0, 2)),
        "energy": np.sum(np.abs(outcome.G) ** 2, axis=(0, 2)),
        "sym_err": np.sum(outcome.x_idx != outcome.x_hat_idx, axis=1) * act,
        "sym_n": act * outcome.x_idx.shape[1],
    }


def per_ue_from_counts(sums: dict, trials: int) -> dict:
    """Per-UE DER, NMSE and SER from summed :func:`per_ue_counts` of ``trials`` trials."""
    en, sym_n = sums["energy"], sums["sym_n"]
    with np.errstate(invalid="ignore", divide="ignore"):
        return {
            "der": sums["der_err"] / trials,
            "nmse": np.where(en > 0, sums["sq_err"] / np.where(en > 0, en, 1.0), np.nan),
            "ser": np.where(sym_n > 0, sums["sym_err"] / np.where(sym_n > 0, sym_n, 1), np.nan),
        }


def per_ue_values(outcomes: Iterable[TrialOutcome]) -> dict:
    """Per-UE DER, NMSE and SER over the trials of one drop.

    NMSE of UE ``k`` is normalized by that UE's own channel energy; SER uses
    only the trials in which the UE is active. Entries without a defined value
    are NaN.
    """
    counts = [per_ue_counts(o) for o in outcomes]
    sums = {key: sum(c[key] for c in counts) for key in counts[0]}
    return per_ue_from_counts(sums, len(counts))


def per_ue_cdf(values) -> tuple:
    """Empirical CDF as sorted values and the fraction of samples at or below each.

    NaN entries are dropped. Ties produce a single step to the highest fraction.
    """
    v = np.asarray(values, dtype=float).ravel()
    v = np.sort(v[np.isfinite(v)])
    if v.size == 0:
        return v, v.copy()
    x, counts = np.unique(v, return_counts=True)
    return x, np.cumsum(counts) / v.size


def cdf_at(x, frac, query) -> np.ndarray:
    """Evaluate a right-continuous step CDF at ``query``."""
    i = np.searchsorted(x, np.asarray(query, dtype=float), side="right")
    return np.where(i > 0, np.asarray(frac)[np.maximum(i - 1, 0)], 0.0)
