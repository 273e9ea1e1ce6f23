"""Acceptance criteria. Each test records one PASS/FAIL line, echoed at the end of the run.

The full-scale campaign shared by criteria 3 and 6 takes about four hours on a
single core. Its result is cached under ``.cache/acceptance`` keyed by the
campaign config and a hash of the package source, so it is recomputed only
when either changes.
"""

import hashlib
import json
import pickle
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest

import cfjacd
from cfjacd import engine as en
from cfjacd import expfam as ef
from cfjacd import harness as hs
from cfjacd import linalg
from cfjacd import metrics as mt
from cfjacd import sysmodel as sm
from cfjacd.expfam import GaussianMoment
from conftest import ACCEPTANCE_LINES
from instances import MICRO_SNR_DB, marginal_tv, micro_instance, pilot_only_ser
from oracles import bg_product_quadrature, cn_density, complex_grid, enumerate_posterior

ALPHA = 0.01
CACHE_DIR = Path(__file__).resolve().parents[1] / ".cache" / "acceptance"

FULL_CAMPAIGN = hs.CampaignConfig(
    network=sm.NetworkConfig(L=25, N=1, K=40, T=60, Tp=1, lam=0.3),
    tp=(4, 6, 8),
    trials=1000,
    drops=100,
    i_max=20,
    eta=0.5,
    seed=2024,
)


def report(n, ok, detail, seconds):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({seconds:.1f} s) {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def sign_test(better, worse):
    """One-sided sign test that ``better < worse`` on paired trials; ties are dropped."""
    wins = int(np.sum(better < worse))
    losses = int(np.sum(better > worse))
    p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return p, wins, losses


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(cfjacd.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def full_campaign() -> hs.CampaignResult:
    """Result of :data:`FULL_CAMPAIGN`, from the cache when code and config are unchanged."""
    key = hashlib.sha256(json.dumps(FULL_CAMPAIGN.to_dict(), sort_keys=True).encode()
                         + source_digest().encode()).hexdigest()[:16]
    path = CACHE_DIR / f"full-{key}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    result = hs.run_campaign(FULL_CAMPAIGN)
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(result, fh)
    tmp.replace(path)
    return result


@pytest.fixture(scope="module")
def campaign():
    result = full_campaign()
    return result, result.wall_seconds


# --- 1: BG algebra ----------------------------------------------------------


def test_criterion_1_bg_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        l1, l2 = rng.uniform(0.05, 0.95, 2)
        mu1, mu2 = (rng.normal(size=2) + 1j * rng.normal(size=2)) * 1.5
        v1, v2 = rng.uniform(0.3, 3.0, 2)
        a = ef.bg_from_moments(l1, GaussianMoment([mu1], [[v1]]))
        b = ef.bg_from_moments(l2, GaussianMoment([mu2], [[v2]]))
        prod, log_z = ef.bg_multiply(a, b)
        lam, m = ef.bg_to_moments(prod)
        q_lam, q_mu, q_var, q_logz = bg_product_quadrature(l1, mu1, v1, l2, mu2, v2)
        errs = (
            abs(lam - q_lam) / q_lam,
            abs(m.mu[0] - q_mu) / max(abs(q_mu), np.sqrt(q_var)),
            abs(m.cov[0, 0].real - q_var) / q_var,
            abs(log_z - q_logz) / max(abs(q_logz), 1.0),
        )
        worst = max(worst, *errs)
    # density: point mass plus slab integrates to one
    dens = ef.bg_from_moments(0.37, GaussianMoment([0.4 - 0.2j], [[0.8]]))
    z, da = complex_grid([0.4 - 0.2j], np.sqrt(0.8), np.sqrt(0.8))
    z = z[np.abs(z) > 0].ravel()
    slab = np.exp([ef.bg_logpdf(x, dens) for x in z]).sum() * da
    mass_err = abs(np.exp(ef.bg_logpdf(0.0, dens)) + slab - 1.0)
    # activity -> 1 limit reduces to the Gaussian product lemma
    p = 1 - 1e-12
    a = ef.bg_from_moments(p, GaussianMoment([1 + 1j], [[2.0]]))
    b = ef.bg_from_moments(p, GaussianMoment([-0.5], [[0.7]]))
    prod, log_z = ef.bg_multiply(a, b)
    gprod, glog_z = ef.gauss_multiply(a.gauss, b.gauss)
    lemma_err = max(abs(ef.bg_activity(prod) - 1), abs(log_z - glog_z),
                    np.abs(prod.gauss.lam - gprod.lam).max(), np.abs(prod.gauss.gamma - gprod.gamma).max())
    # scalar lemma by hand: CN(0 | mu1 - mu2, v1 + v2)
    lemma_err = max(lemma_err, abs(np.exp(glog_z) - cn_density(1.5 + 1j, 0, 2.7)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and mass_err <= 1e-6 and lemma_err <= 1e-8 and dt < 10
    report(1, ok, f"worst product rel err {worst:.1e} over 200 cases, density mass err {mass_err:.1e}, "
                  f"Gaussian-limit err {lemma_err:.1e}", dt)


# --- 2: micro-instance posterior equivalence --------------------------------


def test_criterion_2_micro_posterior():
    t0 = time.perf_counter()
    cfg, sc = micro_instance(MICRO_SNR_DB, lam=0.3, seed=0)
    ser0 = pilot_only_ser(cfg, sc, 2000)
    rng = np.random.default_rng(11)
    rates = {}
    tvs = {v: [] for v in en.Variant}
    for _ in range(100):
        r = sm.draw_realization(cfg, sc, rng)
        pu, px = enumerate_posterior(r.Y[:, 0, :], sc.pilots, sc.constellation, sc.xi, sc.lam, sc.sigma_n2, cfg.Td)
        obs = en.Observation.from_received(sc, r.Y)
        for v in en.Variant:
            est, _ = en.run(obs, en.Priors.model(sc), v)
            tvs[v].append(marginal_tv(pu, px, est))
    for v in en.Variant:
        rates[v.value] = float(np.mean(np.array(tvs[v]) <= 0.1))
    dt = time.perf_counter() - t0
    ok = all(r >= 0.9 for r in rates.values()) and dt < 120
    detail = ", ".join(f"{k} {100 * r:.0f}%" for k, r in rates.items())
    report(2, ok, f"trials with max marginal TV <= 0.1: {detail} (need 90%); pilot-only SER {100 * ser0:.1f}%", dt)


# --- 3: full-scale trends ----------------------------------------------------


def per_trial(result, algo, tp, metric):
    return result.per_trial(algo, tp, metric)[:, 0]


@pytest.mark.slow
def test_criterion_3_full_scale_trends(campaign):
    result, dt = campaign
    parts, ok = [], True

    def check(name, cond, p):
        nonlocal ok
        good = bool(cond) and p < ALPHA
        ok &= good
        parts.append(f"{name} {'ok' if good else 'FAIL'} (p={p:.1e})")

    for tp in (4, 6, 8):
        ref = per_trial(result, "jac-ep", tp, "der")
        for algo in ("jacd-ep", "jacd-ep-bg"):
            p, _, _ = sign_test(per_trial(result, algo, tp, "der"), ref)
            check(f"a:DER {algo}<jac-ep Tp={tp}", result.value(algo, tp, "der") < result.value("jac-ep", tp, "der"), p)
    ref = per_trial(result, "lmmse", 6, "ser")
    for algo in ("jacd-ep", "jacd-ep-bg"):
        p, _, _ = sign_test(per_trial(result, algo, 6, "ser"), ref)
        check(f"b:SER {algo}<lmmse", result.value(algo, 6, "ser") < result.value("lmmse", 6, "ser"), p)
    bound = per_trial(result, "mmse-genie-data", 8, "nmse")
    gap = 10 * np.log10(result.value("jacd-ep-bg", 8, "nmse") / result.value("mmse-genie-data", 8, "nmse"))
    p, _, _ = sign_test(per_trial(result, "jacd-ep-bg", 8, "nmse"), 10 ** 0.1 * bound)
    check(f"c:NMSE gap {gap:.2f} dB<=1", gap <= 1.0, p)
    p, w, l = sign_test(per_trial(result, "jacd-ep-bg", 4, "ser"), per_trial(result, "jacd-ep", 4, "ser"))
    check(f"d:SER bg<=ep Tp=4 ({w}/{l})", result.value("jacd-ep-bg", 4, "ser") <= result.value("jacd-ep", 4, "ser"), p)
    report(3, ok, f"{FULL_CAMPAIGN.trials} paired trials: " + "; ".join(parts), dt)


# --- 4: fronthaul -------------------------------------------------------------


def test_criterion_4_fronthaul():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    ok, seen = True, []
    for _ in range(3):
        L = int(rng.choice([1, 4, 9]))
        K = int(rng.integers(2, 9))
        Tp = int(rng.integers(1, K + 1))
        cfg = sm.NetworkConfig(L=L, K=K, T=Tp + int(rng.integers(0, 10)), Tp=Tp, M=4)
        sc = sm.build_scenario(cfg, rng)
        r = sm.draw_realization(cfg, sc, rng)
        obs = en.Observation.from_received(sc, r.Y)
        for v in en.Variant:
            est, _ = en.run(obs, en.Priors.model(sc), v, i_max=3)
            ok &= est.fronthaul == [hs.fronthaul_load(cfg)] * 3
        seen.append(f"L={L},K={K},Td={cfg.Td}:{hs.fronthaul_load(cfg)}")
    report(4, ok, "instrumented count equals 2LK(Td(M-1)+1) for " + ", ".join(seen), time.perf_counter() - t0)


# --- 5: engine invariants ---------------------------------------------------


class InvariantChecker:
    """Observer asserting the message-passing identities after the step that sets them."""

    def __init__(self, obs, priors):
        self.obs, self.priors = obs, priors
        self.worst = {"identity": 0.0, "loo": 0.0, "norm": 0.0}
        self.pd_ok = True

    def __call__(self, i, step, s):
        obs = self.obs
        if step == "y->z":
            recon = s.yz_mu + s.zz_mu.sum(axis=1, keepdims=True) - s.zz_mu
            err = np.abs(recon - obs.y[:, None]).max() / max(1.0, np.abs(obs.y).max())
            self.worst["identity"] = max(self.worst["identity"], err)
        elif step == "x->z":
            tot = s.zx.sum(axis=0)
            err = max(np.abs(s.xz[l] - en._normalize(tot - s.zx[l])).max() for l in range(obs.L))
            self.worst["loo"] = max(self.worst["loo"], err)
        elif step == "u->psig":
            tot = self.priors.log_pu + s.psigu.sum(axis=0)
            err = max(np.abs(s.upsig[l] - en._normalize(tot - s.psigu[l])).max() for l in range(obs.L))
            self.worst["loo"] = max(self.worst["loo"], err)
        elif step == "g->z":
            tot = s.psigg_gamma[:, :, None] + s.zg_gamma.sum(axis=2, keepdims=True)
            err = np.abs(s.gz_gamma - (tot - s.zg_gamma)).max() / max(1.0, np.abs(tot).max())
            self.worst["loo"] = max(self.worst["loo"], err)
        for name in ("zx", "xz", "psigu", "upsig"):
            p = np.exp(getattr(s, name)).sum(-1)
            if p.size:
                self.worst["norm"] = max(self.worst["norm"], np.abs(p - 1.0).max())
        for name in ("yz_cov", "zz_cov"):
            c = getattr(s, name)
            self.pd_ok &= bool(np.all(c == np.conj(np.swapaxes(c, -1, -2))) and np.all(linalg.is_pd(c)))


def test_criterion_5_engine_invariants():
    t0 = time.perf_counter()
    cfg = sm.NetworkConfig(L=9, K=16, T=40, Tp=6)
    pilots = sm.design_pilots(cfg.K, cfg.Tp, cfg.sigma_x2)
    sc = sm.build_scenario(cfg, np.random.default_rng(5), pilots=pilots)
    worst = {"identity": 0.0, "loo": 0.0, "norm": 0.0}
    pd_ok = deterministic = True
    for trial in range(50):
        r = sm.realization_from_seed(cfg, sc, trial)
        obs = en.Observation.from_received(sc, r.Y)
        post = en.jac_ep_initialize(obs, en.Priors.model(sc))
        for v in en.Variant:
            checker = InvariantChecker(obs, post)
            est, _ = en.run(obs, post, v, rng=np.random.default_rng(trial), observer=checker)
            again, _ = en.run(obs, post, v, rng=np.random.default_rng(trial))
            for k, val in checker.worst.items():
                worst[k] = max(worst[k], val)
            pd_ok &= checker.pd_ok
            deterministic &= all(np.array_equal(getattr(est, f), getattr(again, f))
                                 for f in ("u_hat", "soft_u", "h_hat", "x_idx", "soft_x"))
    ok = worst["identity"] <= 1e-10 and worst["loo"] <= 1e-12 and worst["norm"] <= 1e-12 and pd_ok and deterministic
    report(5, ok, f"50 desk-scale trials x 2 variants: identity {worst['identity']:.1e}, leave-one-out "
                  f"{worst['loo']:.1e}, normalization {worst['norm']:.1e}, PD {pd_ok}, bit-identical {deterministic}",
           time.perf_counter() - t0)


# --- 6: genie orderings -----------------------------------------------------


@pytest.mark.slow
def test_criterion_6_genie_ordering(campaign):
    result, dt = campaign
    parts, ok = [], True
    p, w, l = sign_test(per_trial(result, "lmmse-genie", 6, "ser"), per_trial(result, "lmmse", 6, "ser"))
    good = result.value("lmmse-genie", 6, "ser") <= result.value("lmmse", 6, "ser") and p < ALPHA
    ok &= good
    parts.append(f"SER lmmse-genie<=lmmse {'ok' if good else 'FAIL'} (p={p:.1e})")
    bound = per_trial(result, "mmse-genie-data", 6, "nmse")
    for algo in ("jac-ep", "jacd-ep", "jacd-ep-bg", "lmmse"):
        p, w, l = sign_test(bound, per_trial(result, algo, 6, "nmse"))
        good = result.value("mmse-genie-data", 6, "nmse") <= result.value(algo, 6, "nmse") and p < ALPHA
        ok &= good
        parts.append(f"NMSE genie<={algo} {'ok' if good else 'FAIL'} (p={p:.1e})")
    report(6, ok, f"Tp=6, {FULL_CAMPAIGN.trials} paired trials: " + "; ".join(parts), dt)


# --- 7: noiseless sanity ----------------------------------------------------


def test_criterion_7_noiseless():
    t0 = time.perf_counter()
    cfg = sm.NetworkConfig(L=1, N=1, K=1, T=10, Tp=1, lam=0.5, ap_layout="center")
    base = sm.build_scenario(cfg, np.random.default_rng(0))
    # unit link gain so that 1e-12 mW of noise is negligible against the signal
    sc = sm.Scenario(base.geometry, np.ones((1, 1)), base.pilots, base.constellation, base.sigma_x2, 1e-12, cfg.lam)
    parts, ok = [], True
    for v in en.Variant:
        outs = []
        for trial in range(100):
            r = sm.realization_from_seed(cfg, sc, trial)
            obs = en.Observation.from_received(sc, r.Y)
            post = en.jac_ep_initialize(obs, en.Priors.model(sc))
            est, _ = en.run(obs, post, v, rng=np.random.default_rng(trial))
            outs.append(mt.TrialOutcome(r.u, est.u_hat, r.G, est.g_hat, r.data_idx, est.x_idx))
        d, n, s = mt.der(outs), mt.nmse(outs), mt.ser(outs)
        ok &= d == 0 and s == 0 and n < 1e-6
        parts.append(f"{v.value}: DER {d:g}, SER {s:g}, NMSE {n:.1e}")
    report(7, ok, "K=L=1, orthogonal pilot, 100 trials: " + "; ".join(parts), time.perf_counter() - t0)
