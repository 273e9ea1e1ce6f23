"""Monte Carlo campaign driver: configuration, seeding, paired trials and result files.

A campaign sweeps the pilot length ``Tp``. For every ``(drop, Tp, trial)`` one
realization is drawn and every requested algorithm runs on it, so comparisons
between algorithms are paired. Trial ``i`` belongs to drop ``i % drops``; a
drop fixes AP/UE geometry and large-scale fading and is shared by all ``Tp``.

Seeds derive from ``(master seed, drop)`` for geometry and from
``(master seed, drop, Tp, trial)`` for realizations, so any cell can be
recomputed on its own and results do not depend on the worker count.
"""

import csv
import hashlib
import json
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines
from .engine import EngineConfig, JsonlTrace, Observation, Priors, Variant, jac_ep_estimates, jac_ep_initialize, run
from .metrics import METRICS, Accumulator, TrialOutcome, per_ue_cdf, per_ue_counts, per_ue_from_counts
from .sysmodel import ConfigError, NetworkConfig, build_scenario, design_pilots, draw_realization

ALGORITHMS = ("jac-ep", "jacd-ep", "jacd-ep-bg", "lmmse", "lmmse-genie", "mmse-genie-data")

#: Algorithms that need the pilot-only initializer.
_NEEDS_INIT = {"jac-ep", "jacd-ep", "jacd-ep-bg", "lmmse"}

WORKERS_ENV = "CFJACD_WORKERS"

PRESETS = {
    "desk": {
        "network": {"L": 9, "K": 16, "T": 40},
        "tp": [2, 4, 6, 8],
        "trials": 200,
        "drops": 20,
    },
    "paper": {
        "network": {"L": 25, "K": 40, "T": 60},
        "tp": [4, 5, 6, 7, 8],
        "trials": 1000,
        "drops": 100,
    },
}

_NETWORK_FIELDS = {f.name for f in fields(NetworkConfig)} - {"Tp"}


@dataclass(frozen=True)
class CampaignConfig:
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(L=9, K=16, T=40))
    algorithms: tuple = ALGORITHMS
    tp: tuple = (2, 4, 6, 8)
    trials: int = 200
    drops: int = 20
    i_max: int = 20
    eta: float = 0.5
    init_iters: int = 20
    seed: int = 0
    #: Tp of the per-UE CDF study; ``None`` picks 6 when swept, else the middle Tp.
    cdf_tp: Optional[int] = None
    pilot_budget: int = 20_000_000
    out: str = "results"
    trace: bool = False
    #: Record wall-clock seconds in the CSV; off by default so outputs are byte-reproducible.
    timing: bool = False

    def __post_init__(self):
        errors = validate(self)
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def engine(self) -> EngineConfig:
        return EngineConfig(i_max=self.i_max, eta=self.eta, init_iters=self.init_iters)

    @property
    def cdf_tp_resolved(self) -> int:
        if self.cdf_tp is not None:
            return self.cdf_tp
        return 6 if 6 in self.tp else self.tp[len(self.tp) // 2]

    def with_(self, **kw) -> "CampaignConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = {k: v for k, v in asdict(self.network).items() if k != "Tp"}
        d["algorithms"] = list(self.algorithms)
        d["tp"] = list(self.tp)
        return d


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def validate(cfg: CampaignConfig) -> list:
    """Every violated constraint as ``"field.path: message"``."""
    errors = []
    if not cfg.algorithms:
        errors.append("algorithms: at least one algorithm is required")
    for i, a in enumerate(cfg.algorithms):
        if a not in ALGORITHMS:
            errors.append(f"algorithms[{i}]: unknown algorithm {a!r}, expected one of {', '.join(ALGORITHMS)}")
    if len(set(cfg.algorithms)) != len(cfg.algorithms):
        errors.append("algorithms: duplicate entries")
    if not cfg.tp:
        errors.append("tp: at least one pilot length is required")
    for i, tp in enumerate(cfg.tp):
        if not _is_int(tp) or not 1 <= tp <= min(cfg.network.T, cfg.network.K):
            errors.append(f"tp[{i}]: must be an integer in [1, min(T, K)] = [1, {min(cfg.network.T, cfg.network.K)}]")
    if len(set(cfg.tp)) != len(cfg.tp):
        errors.append("tp: duplicate entries")
    for name, lo in (("trials", 1), ("drops", 1), ("i_max", 0), ("init_iters", 0), ("seed", 0), ("pilot_budget", 1)):
        v = getattr(cfg, name)
        if not _is_int(v) or v < lo:
            errors.append(f"{name}: must be an integer >= {lo}")
    if _is_int(cfg.trials) and _is_int(cfg.drops) and cfg.drops > cfg.trials:
        errors.append("drops: must not exceed trials")
    if not isinstance(cfg.eta, (int, float)) or isinstance(cfg.eta, bool) or not 0.0 <= cfg.eta <= 1.0:
        errors.append("eta: must lie in [0, 1]")
    if cfg.cdf_tp is not None and cfg.cdf_tp not in cfg.tp:
        errors.append("cdf_tp: must be one of the swept tp values")
    for name in ("trace", "timing"):
        if not isinstance(getattr(cfg, name), bool):
            errors.append(f"{name}: must be true or false")
    return errors


def config_from_dict(d: dict, overrides: Optional[dict] = None) -> CampaignConfig:
    """Build a config from a parsed file, an optional ``preset`` and flag overrides.

    Precedence: defaults < preset < file < overrides. All problems are reported
    together in one :class:`ConfigError` with field paths.
    """
    d = dict(d or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    errors = []
    preset = overrides.pop("preset", None) or d.pop("preset", None)
    d.pop("preset", None)
    merged = {"network": {}}
    if preset is not None:
        if preset not in PRESETS:
            errors.append(f"preset: unknown preset {preset!r}, expected one of {', '.join(PRESETS)}")
        else:
            p = PRESETS[preset]
            merged.update({k: v for k, v in p.items() if k != "network"})
            merged["network"].update(p["network"])
    net = d.pop("network", None) or {}
    if not isinstance(net, dict):
        errors.append("network: must be a mapping")
        net = {}
    for k, v in net.items():
        if k not in _NETWORK_FIELDS:
            errors.append(f"network.{k}: unknown field")
        else:
            merged["network"][k] = v
    engine = d.pop("engine", None) or {}
    if not isinstance(engine, dict):
        errors.append("engine: must be a mapping")
        engine = {}
    campaign_fields = {f.name for f in fields(CampaignConfig)} - {"network"}
    for k, v in list(engine.items()) + list(d.items()):
        if k not in campaign_fields:
            errors.append(f"{k}: unknown field")
        else:
            merged[k] = v
    merged.update(overrides)
    if errors:
        raise ConfigError("; ".join(errors))

    try:
        network = NetworkConfig(**merged.pop("network"), Tp=1)
    except (ConfigError, TypeError) as e:
        raise ConfigError("; ".join(f"network: {m}" for m in str(e).split("; "))) from None
    for key in ("algorithms", "tp"):
        if key in merged:
            v = merged[key]
            merged[key] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
    return CampaignConfig(network=network, **merged)


def load_config(path, overrides: Optional[dict] = None) -> CampaignConfig:
    """Read a YAML campaign file (``path=None`` uses defaults plus overrides)."""
    import yaml

    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"config: cannot read {path}: {e.strerror}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config: {path} is not valid YAML: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a mapping")
    return config_from_dict(d, overrides)


# --- fronthaul ------------------------------------------------------------


def fronthaul_load(cfg: NetworkConfig) -> int:
    """Real numbers crossing the AP/CPU boundary per iteration, ``2 L K (Td (M - 1) + 1)``."""
    return 2 * cfg.L * cfg.K * (cfg.Td * (cfg.M - 1) + 1)


# --- trials ---------------------------------------------------------------


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def realization_hash(r) -> str:
    h = hashlib.sha256()
    for a in (r.u, r.data_idx, r.X, r.Y):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class TrialRecord:
    """Compact result of one algorithm on one realization."""

    algorithm: str
    tp: int
    drop: int
    trial: int
    counts: dict
    per_ue: dict
    seconds: float
    digest: str


def _outcome(r, u_hat, G_hat, x_hat_idx, drop, trial):
    x_idx = r.data_idx if x_hat_idx is not None else r.data_idx[:, :0]
    x_hat = x_hat_idx if x_hat_idx is not None else x_idx
    return TrialOutcome(r.u, np.asarray(u_hat), r.G, G_hat, x_idx, x_hat, drop, trial)


def run_trial(cfg: CampaignConfig, scenario, tp: int, drop: int, trial: int, trace_dir=None) -> list:
    """Draw one realization and run every configured algorithm on it."""
    net = cfg.network.with_(Tp=tp)
    r = draw_realization(net, scenario, _rng(cfg.seed, drop, tp, trial))
    digest = realization_hash(r)
    obs = Observation.from_received(scenario, r.Y)
    Yd = r.Y[:, :, tp:]
    ecfg = cfg.engine
    records = []
    post, t_init = None, 0.0
    if _NEEDS_INIT & set(cfg.algorithms):
        t0 = time.perf_counter()
        post = jac_ep_initialize(obs, Priors.model(scenario), ecfg)
        t_init = time.perf_counter() - t0

    for algo in cfg.algorithms:
        rng = _rng(cfg.seed, drop, tp, trial, 1 + ALGORITHMS.index(algo))
        t0 = time.perf_counter()
        if algo == "jac-ep":
            est = jac_ep_estimates(post, obs)
            out = _outcome(r, est.u_hat, est.g_hat, None, drop, trial)
        elif algo in ("jacd-ep", "jacd-ep-bg"):
            observer, fh = None, None
            if trace_dir is not None:
                fh = open(Path(trace_dir) / f"trace_tp{tp}_{algo}.jsonl", "w")
                observer = JsonlTrace(fh, label=algo)
            try:
                est, _ = run(obs, post, Variant(algo), ecfg, rng=rng, observer=observer)
            finally:
                if fh is not None:
                    fh.close()
            out = _outcome(r, est.u_hat, est.g_hat, est.x_idx, drop, trial)
        elif algo == "lmmse":
            u_hat = (post.pu > 0.5).astype(np.int64)
            G_hat = post.mu * u_hat[None, :, None]
            x = baselines.lmmse_detect(G_hat, Yd, net.sigma_n2, net.sigma_x2, scenario.constellation, u_hat, rng)
            out = _outcome(r, u_hat, G_hat, x, drop, trial)
        elif algo == "lmmse-genie":
            x = baselines.lmmse_detect(r.G, Yd, net.sigma_n2, net.sigma_x2, scenario.constellation, r.u, rng)
            out = _outcome(r, r.u, r.G, x, drop, trial)
        else:  # mmse-genie-data
            G_hat = baselines.mmse_channel_estimate(r.Y, r.X, scenario.correlation(), r.u, net.sigma_n2)
            out = _outcome(r, r.u, G_hat, None, drop, trial)
        seconds = time.perf_counter() - t0 + (t_init if algo in _NEEDS_INIT else 0.0)
        records.append(TrialRecord(algo, tp, drop, trial, out.counts(), per_ue_counts(out), seconds, digest))

    if realization_hash(r) != digest:
        raise RuntimeError(f"realization of drop {drop}, Tp {tp}, trial {trial} was modified by an algorithm")
    return records


def drop_scenario(cfg: CampaignConfig, tp: int, drop: int, pilots):
    """Scenario of ``drop`` with the pilots of ``tp``; geometry is independent of ``tp``."""
    return build_scenario(cfg.network.with_(Tp=tp), _rng(cfg.seed, drop), pilots=pilots)


def _run_job(job):
    cfg, tp, drop, trials, pilots, trace_dir = job
    scenario = drop_scenario(cfg, tp, drop, pilots)
    out = []
    for trial in trials:
        tdir = trace_dir if (trace_dir is not None and drop == 0 and trial == 0) else None
        out.extend(run_trial(cfg, scenario, tp, drop, trial, tdir))
    return out


def worker_count() -> int:
    v = os.environ.get(WORKERS_ENV)
    if v:
        try:
            n = int(v)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV}: must be a positive integer, got {v!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV}: must be a positive integer, got {v!r}")
        return n
    return os.cpu_count() or 1


# --- campaign -------------------------------------------------------------


@dataclass
class CellResult:
    """Accumulated metrics of one ``(algorithm, Tp)`` pair."""

    total: Accumulator = field(default_factory=Accumulator)
    per_drop: dict = field(default_factory=dict)
    ue_sums: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class CampaignResult:
    config: CampaignConfig
    cells: dict  # (algorithm, tp) -> CellResult
    pilot_coherence: dict
    wall_seconds: float

    def value(self, algorithm, tp, metric) -> float:
        return self.cells[(algorithm, tp)].total.value(metric)

    def per_trial(self, algorithm, tp, metric) -> np.ndarray:
        """``(trials, 2)`` numerators and denominators in ``(drop, trial)`` order."""
        return np.array(self.cells[(algorithm, tp)].total.per_trial[metric], dtype=float).reshape(-1, 2)

    def per_ue(self, algorithm, tp) -> dict:
        """Per-UE metric values of all drops, concatenated in drop order."""
        cell = self.cells[(algorithm, tp)]
        parts = [per_ue_from_counts(sums, n) for _, (sums, n) in sorted(cell.ue_sums.items())]
        return {m: np.concatenate([p[m] for p in parts]) for m in METRICS}


def _jobs(cfg, pilots, trace_dir):
    for tp in cfg.tp:
        for drop in range(cfg.drops):
            trials = list(range(drop, cfg.trials, cfg.drops))
            yield (cfg, tp, drop, trials, pilots[tp], trace_dir)


def run_campaign(cfg: CampaignConfig, workers: Optional[int] = None) -> CampaignResult:
    """Run all ``(drop, Tp, trial)`` cells and accumulate metrics per algorithm and Tp.

    Records are merged in ``(Tp, drop, trial)`` order whatever the worker count,
    so the sums, and therefore all outputs, are identical to a serial run.
    """
    t0 = time.perf_counter()
    workers = worker_count() if workers is None else workers
    pilots = {tp: design_pilots(cfg.network.K, tp, cfg.network.sigma_x2, cfg.pilot_budget) for tp in cfg.tp}
    trace_dir = None
    if cfg.trace:
        trace_dir = Path(cfg.out)
        trace_dir.mkdir(parents=True, exist_ok=True)
    jobs = list(_jobs(cfg, pilots, trace_dir))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_job, jobs))
    else:
        batches = [_run_job(j) for j in jobs]

    cells = {(a, tp): CellResult() for tp in cfg.tp for a in cfg.algorithms}
    digests = {}
    for rec in sorted((r for b in batches for r in b), key=lambda r: (r.tp, r.drop, r.trial, ALGORITHMS.index(r.algorithm))):
        key = (rec.tp, rec.drop, rec.trial)
        if digests.setdefault(key, rec.digest) != rec.digest:
            raise RuntimeError(f"unpaired realization in cell Tp={rec.tp}, drop={rec.drop}, trial={rec.trial}")
        cell = cells[(rec.algorithm, rec.tp)]
        cell.total.add_counts(rec.counts)
        cell.per_drop.setdefault(rec.drop, Accumulator()).add_counts(rec.counts)
        sums, n = cell.ue_sums.get(rec.drop, (None, 0))
        sums = dict(rec.per_ue) if sums is None else {k: sums[k] + rec.per_ue[k] for k in sums}
        cell.ue_sums[rec.drop] = (sums, n + 1)
        cell.seconds += rec.seconds
    return CampaignResult(cfg, cells, {tp: pilots[tp].coherence for tp in cfg.tp}, time.perf_counter() - t0)


# --- results --------------------------------------------------------------

CSV_HEADER = ("algorithm", "tp", "drop", "metric", "value", "trials", "stderr", "seconds")


@dataclass(frozen=True)
class ResultRow:
    algorithm: str
    tp: int
    drop: str  # drop index, or "all" for the campaign aggregate
    metric: str
    value: float
    trials: int
    stderr: float
    seconds: float


def result_rows(result: CampaignResult) -> list:
    """Aggregate rows (``drop="all"``) followed by per-drop rows."""
    cfg = result.config
    rows = []
    for tp in cfg.tp:
        for a in cfg.algorithms:
            cell = result.cells[(a, tp)]
            seconds = cell.seconds if cfg.timing else 0.0
            for m in METRICS:
                rows.append(ResultRow(a, tp, "all", m, cell.total.value(m), cell.total.trials, cell.total.stderr(m), seconds))
    for tp in cfg.tp:
        for a in cfg.algorithms:
            cell = result.cells[(a, tp)]
            for drop, acc in sorted(cell.per_drop.items()):
                for m in METRICS:
                    rows.append(ResultRow(a, tp, str(drop), m, acc.value(m), acc.trials, acc.stderr(m), 0.0))
    return rows


def _num(v) -> str:
    return "%.10g" % v


def _round(v):
    """Float with 10 significant digits, NaN/inf as None for JSON."""
    if v is None:
        return None
    v = float(v)
    return float(_num(v)) if math.isfinite(v) else None


def write_csv(rows, path) -> Path:
    if not rows:
        raise ValueError("no result rows to write")
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in rows:
                w.writerow([r.algorithm, r.tp, r.drop, r.metric, _num(r.value), r.trials, _num(r.stderr), _num(r.seconds)])
    except OSError as e:
        raise OSError(e.errno, f"cannot write results to {path}: {e.strerror}") from None
    return path


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            ResultRow(d["algorithm"], int(d["tp"]), d["drop"], d["metric"], float(d["value"]), int(d["trials"]),
                      float(d["stderr"]), float(d["seconds"]))
            for d in reader
        ]


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


_SERIES = {"type": "array", "items": {"type": ["number", "null"]}}

SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["config", "version", "fronthaul_load", "fig4a", "fig4b", "fig4c", "fig5a", "fig5b", "fig5c"],
    "properties": {
        "config": {"type": "object", "required": ["network", "algorithms", "tp", "trials", "drops", "seed"]},
        "version": {"type": "string"},
        "wall_seconds": {"type": ["number", "null"]},
        "fronthaul_load": {
            "type": "array",
            "items": {"type": "object", "required": ["tp", "reals_per_iteration"],
                      "properties": {"tp": {"type": "integer"}, "reals_per_iteration": {"type": "integer"}}},
        },
        "pilot_coherence": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
    },
    "patternProperties": {
        "^fig4[abc]$": {
            "type": "object",
            "required": ["metric", "tp", "series"],
            "properties": {
                "metric": {"enum": list(METRICS)},
                "tp": {"type": "array", "items": {"type": "integer"}},
                "series": {"type": "object", "additionalProperties": {
                    "type": "object", "required": ["value", "stderr"],
                    "properties": {"value": _SERIES, "stderr": _SERIES}}},
            },
        },
        "^fig5[abc]$": {
            "type": "object",
            "required": ["metric", "tp", "series"],
            "properties": {
                "metric": {"enum": list(METRICS)},
                "tp": {"type": "integer"},
                "series": {"type": "object", "additionalProperties": {
                    "type": "object", "required": ["x", "cdf"],
                    "properties": {"x": _SERIES, "cdf": _SERIES}}},
            },
        },
    },
}


def summary(result: CampaignResult) -> dict:
    """JSON-ready summary with config echo and per-figure series."""
    cfg = result.config
    out = {
        "config": cfg.to_dict(),
        "version": git_describe(),
        "wall_seconds": _round(result.wall_seconds) if cfg.timing else None,
        "fronthaul_load": [{"tp": tp, "reals_per_iteration": fronthaul_load(cfg.network.with_(Tp=tp))} for tp in cfg.tp],
        "pilot_coherence": {str(tp): _round(c) for tp, c in result.pilot_coherence.items()},
    }
    for suffix, m in zip("abc", METRICS):
        out[f"fig4{suffix}"] = {
            "metric": m,
            "tp": list(cfg.tp),
            "series": {a: {"value": [_round(result.value(a, tp, m)) for tp in cfg.tp],
                           "stderr": [_round(result.cells[(a, tp)].total.stderr(m)) for tp in cfg.tp]}
                       for a in cfg.algorithms},
        }
    tp = cfg.cdf_tp_resolved
    per_ue = {a: result.per_ue(a, tp) for a in cfg.algorithms}
    for suffix, m in zip("abc", METRICS):
        series = {}
        for a in cfg.algorithms:
            x, frac = per_ue_cdf(per_ue[a][m])
            series[a] = {"x": [_round(v) for v in x], "cdf": [_round(v) for v in frac]}
        out[f"fig5{suffix}"] = {"metric": m, "tp": tp, "series": series}
    return out


def emit_results(result: CampaignResult, out_dir=None, plots: bool = True) -> dict:
    """Write ``results.csv``, ``summary.json`` and, with ``plots``, the figure PNGs."""
    out_dir = Path(out_dir if out_dir is not None else result.config.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(e.errno, f"cannot create output directory {out_dir}: {e.strerror}") from None
    paths = {"csv": write_csv(result_rows(result), out_dir / "results.csv")}
    summ = summary(result)
    paths["json"] = out_dir / "summary.json"
    try:
        with open(paths["json"], "w") as fh:
            json.dump(summ, fh, indent=1, allow_nan=False)
            fh.write("\n")
    except OSError as e:
        raise OSError(e.errno, f"cannot write summary to {paths['json']}: {e.strerror}") from None
    if plots:
        from .plotting import render_figures

        paths.update(render_figures(summ, out_dir))
    return paths
