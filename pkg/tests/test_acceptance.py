"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at the
end of the pytest output lists every criterion with its measured values.
"""
import itertools
import math
import time

import numpy as np
from scipy.stats import norm

from periop_aki import cli
from periop_aki.cohort import TimeSeries
from periop_aki.evaluation import auc_score, bootstrap_ci, nri, youden_cutoff
from periop_aki.features import decompose
from periop_aki.forest import f_statistics
from periop_aki.outcomes import HORIZONS, BaselineCreatinine, label_outcomes, mdrd_baseline
from periop_aki.pipeline import PipelineConfig, run_experiment
from periop_aki.preop import penalized_objective
from periop_aki.preprocessing import clean_time_series, impute_tails
from periop_aki.synth import SynthConfig

from conftest import ACCEPTANCE_LINES, make_patient
from oracles import brute_anova_f, brute_auc, brute_kdigo, youden_j

# Forest grid used for the multi-seed reproduction runs (criteria 6 and 7).
# The full default grid costs about two minutes per seed on one core, which
# does not fit ten seeds in the runtime budget.
REPRO_GRID = {"n_trees": (150,), "max_features": ("sqrt",), "min_samples_leaf": (5, 20),
              "alpha": (0.05,)}
SEEDS = range(10)


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1: KDIGO oracle ----------------------------------------------------------

def _trajectory(rng):
    n = int(rng.integers(0, 31))
    times = np.sort(rng.choice(np.arange(0, 400, 0.5), size=n, replace=False))
    base = float(rng.uniform(0.5, 2.0))
    values = np.round(base + rng.normal(0, 0.25, size=n).cumsum() * 0.5, 1).clip(0.1)
    return bool(rng.random() < 0.05), base, list(zip(times.tolist(), values.tolist()))


def test_criterion_1_kdigo_oracle():
    rng = np.random.default_rng(20240)
    cases = [_trajectory(rng) for _ in range(1000)]
    t0 = time.perf_counter()
    agree = 0
    for rrt, base, pts in cases:
        lab = label_outcomes(make_patient(rrt=rrt, postop=pts), BaselineCreatinine(base, "x"))
        agree += all(getattr(lab, h) == brute_kdigo(rrt, base, pts, w) for h, w in HORIZONS.items())
    elapsed = time.perf_counter() - t0
    verdict(1, agree == 1000 and elapsed < 5.0,
            f"{agree}/1000 trajectories agree with brute force, {elapsed:.2f} s")


# -- 2: MDRD ------------------------------------------------------------------

def test_criterion_2_mdrd():
    # hand evaluation: ((186/75) * 0.742 * 60^-0.203)^(1/1.154)
    expected = ((186.0 / 75.0) * 0.742 * 60.0 ** -0.203) ** (1.0 / 1.154)
    got = mdrd_baseline(60, True, False)
    verdict(2, abs(got - expected) <= 1e-3 and abs(got - 0.826) <= 1e-3,
            f"mdrd_baseline(60, female, non-black) = {got:.6f}, hand value {expected:.6f}")


# -- 3: metric oracles --------------------------------------------------------

def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(3)
    auc_err = 0.0
    youden_ok = True
    for _ in range(500):
        n = int(rng.integers(2, 201))
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[0], y[-1] = True, False
        s = rng.integers(0, 25, n) / 7.0 if rng.random() < 0.5 else rng.normal(size=n)
        auc_err = max(auc_err, abs(auc_score(s, y) - brute_auc(s.tolist(), y.tolist())))
        t = youden_cutoff(s, y)
        best = max(youden_j(s, y, c) for c in np.unique(s))
        youden_ok &= bool(abs(youden_j(s, y, t) - best) <= 1e-12)

    nri_ok = 0
    tables = itertools.islice(itertools.product(range(5), range(3), range(4), range(3)), 100)
    for eu, ed, nu, nd in tables:
        ne, nn = 10, 12
        es, ns = ne - eu - ed, nn - nu - nd
        y = np.r_[np.ones(ne, bool), np.zeros(nn, bool)]
        old = np.r_[[0] * eu + [1] * ed + [0] * es, [0] * nu + [1] * nd + [0] * ns]
        new = np.r_[[1] * eu + [0] * ed + [0] * es, [1] * nu + [0] * nd + [0] * ns]
        nri_ok += nri(y, old, new).nri == (eu - ed) / ne + (nd - nu) / nn

    f_err = 0.0
    for _ in range(200):
        n1, n0 = rng.integers(2, 20, size=2)
        a = rng.normal(rng.normal(), rng.uniform(0.1, 3), n1)
        b = rng.normal(rng.normal(), rng.uniform(0.1, 3), n0)
        F, _ = f_statistics(np.r_[a, b], np.r_[np.ones(n1), np.zeros(n0)])
        ref = brute_anova_f(a, b)
        f_err = max(f_err, abs(F[0] - ref) / max(1.0, abs(ref)))

    ok = auc_err <= 1e-12 and youden_ok and nri_ok == 100 and f_err <= 1e-10
    verdict(3, ok, f"AUROC max err {auc_err:.1e}, Youden exact={youden_ok}, "
                   f"NRI {nri_ok}/100 tables exact, F max rel err {f_err:.1e}")


# -- 4: cleaning rules --------------------------------------------------------

def test_criterion_4_cleaning_properties():
    rng = np.random.default_rng(4)
    bounded = 0
    for i in range(100):
        x = [rng.normal, rng.exponential, rng.standard_cauchy][i % 3](size=int(rng.integers(200, 3000)))
        lo, hi = np.quantile(x, [0.005, 0.995])
        y = impute_tails(x, seed=i, name="v")
        bounded += bool(y.min() >= lo and y.max() <= hi)

    ts = TimeSeries("map", np.arange(7.0), [60, 62, 61, 300, 63, 62, 61], (0.0, 1000.0))
    out, _, _ = clean_time_series(ts, 0, 100, min_samples=1)
    fixture = float(out.values[3])

    exact = 0
    for k in range(50):
        n = int(rng.integers(1, 400))
        v = rng.normal(70, 15, n).cumsum() if k % 2 else rng.uniform(-1e4, 1e4, n)
        series = TimeSeries("map", np.sort(rng.uniform(0, 600, n)), v)
        base, resid = decompose(series, int(rng.integers(1, 40)))
        exact += bool(np.array_equal(resid.values, v - base.values))

    ok = bounded == 100 and abs(fixture - 61.8) <= 1e-12 and exact == 50
    verdict(4, ok, f"tail bound held on {bounded}/100 vectors, 5-NN repair gives {fixture:.12g}, "
                   f"decomposition exact on {exact}/50 series")


# -- 5: gradient check --------------------------------------------------------

def test_criterion_5_gradient():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        n, m = int(rng.integers(10, 60)), int(rng.integers(2, 7))
        Z = np.column_stack([np.ones(n), rng.normal(size=(n, m - 1))])
        y = (rng.random(n) < 0.4).astype(float)
        beta = rng.normal(size=m)
        lam = float(rng.uniform(0, 10))
        _, g = penalized_objective(beta, Z, y, lam)
        h = 1e-6
        fd = np.array([(penalized_objective(beta + h * e, Z, y, lam)[0]
                        - penalized_objective(beta - h * e, Z, y, lam)[0]) / (2 * h)
                       for e in np.eye(m)])
        worst = max(worst, np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12))
    verdict(5, worst < 1e-5, f"max relative gradient error {worst:.2e} over 20 problems")


# -- 6 and 7: synthetic reproduction ------------------------------------------

def _repro_config(seed, null=False):
    synth = SynthConfig(n_patients=3000, seed=seed, target_prevalence_7day=0.40)
    if null:
        synth = synth.with_zero_intraop()
    models = ("intraop_only", "preop_only", "proposed") if null else ("preop_only", "proposed")
    return PipelineConfig(seed=seed, synth=synth, outcomes=("aki_7day",), models=models,
                          forest_grid=REPRO_GRID, bootstrap_n=200)


def _held_out(seed, null=False):
    res = run_experiment(_repro_config(seed, null)).results["aki_7day"]
    y = res["labels"]
    out = {name: auc_score(m["test_scores"], y) for name, m in res["models"].items()}
    high = {name: m["test_scores"] >= m["cutoff"] for name, m in res["models"].items()}
    out["nri"] = nri(y, high["preop_only"], high["proposed"]).nri
    return out


def test_criterion_6_directional_reproduction():
    t0 = time.perf_counter()
    wins, parts = 0, []
    for seed in SEEDS:
        r = _held_out(seed)
        delta = r["proposed"] - r["preop_only"]
        win = delta >= 0.01 and r["nri"] > 0
        wins += win
        parts.append(f"s{seed}:{delta:+.3f}/{r['nri']:+.3f}")
    elapsed = time.perf_counter() - t0
    verdict(6, wins >= 9 and elapsed < 600,
            f"{wins}/10 seeds with dAUROC >= 0.01 and NRI > 0, {elapsed:.0f} s "
            f"[{' '.join(parts)}]")


def test_criterion_7_null_controls():
    passes, parts = 0, []
    for seed in SEEDS:
        r = _held_out(seed, null=True)
        delta = r["proposed"] - r["preop_only"]
        ok = abs(delta) <= 0.02 and 0.45 <= r["intraop_only"] <= 0.55
        passes += ok
        parts.append(f"s{seed}:{delta:+.3f}/{r['intraop_only']:.3f}")
    verdict(7, passes >= 6,
            f"{passes}/10 seeds with |dAUROC| <= 0.02 and intraop-only AUROC in [0.45, 0.55] "
            f"[{' '.join(parts)}]")


# -- 8: bootstrap coverage ----------------------------------------------------

def test_criterion_8_bootstrap_coverage():
    # binormal scores: nonevents N(0, 1), events N(d, 1); population AUROC = Phi(d / sqrt 2)
    d = 1.0
    truth = float(norm.cdf(d / math.sqrt(2.0)))
    rng = np.random.default_rng(8)
    covered = 0
    for rep in range(200):
        y = np.r_[np.ones(80, bool), np.zeros(120, bool)]
        s = rng.normal(size=200) + d * y
        ci = bootstrap_ci(auc_score, (s, y), 1000, seed=rep)
        covered += ci.lo <= truth <= ci.hi
    rate = covered / 200
    verdict(8, 0.88 <= rate <= 0.99,
            f"95% percentile CI covered AUROC {truth:.4f} in {covered}/200 replicates ({rate:.1%})")


# -- 9: determinism -----------------------------------------------------------

DETERMINISM_CONFIG = """
[run]
seed = 9
bootstrap_n = 200

[synth]
n_patients = 400

[forest]
n_trees = 30
max_features = sqrt
min_samples_leaf = 5, 20
"""


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(DETERMINISM_CONFIG)
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert cli.main(["run", "--config", str(cfg), "--out", str(d)]) == 0
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    # run_meta.json holds the wall-clock timestamps and is excluded by design
    compared = [f for f in files if f.name != "run_meta.json"]
    same = [f for f in compared if (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()]
    ok = len(same) == len(compared) and (tmp_path / "a" / "report.json").exists()
    verdict(9, ok, f"{len(same)}/{len(compared)} output files byte-identical across two runs "
                   f"(report.json included)")
