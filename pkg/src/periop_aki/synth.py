"""Seeded synthetic surgical cohorts with planted preoperative and intraoperative signal.

Each patient carries two independent latent risk components.  The
preoperative component is a (partly nonlinear) function of demographics,
comorbidities, labs and surgery type.  The intraoperative component is built
from four latent physiologic traits (hypotension, tachycardia, bleeding,
oliguria) that are only visible through the intraoperative series, labs,
medications and totals.  The 7-day AKI outcome is drawn from a logistic model
of their sum, and a creatinine trajectory is then written so that the KDIGO
labeler recovers exactly the drawn outcome.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter
from scipy.special import expit

from .cohort import DEFAULT_SIGNAL_RANGES, Cohort, PatientRecord, TimeSeries
from .errors import InfeasiblePrevalence
from .outcomes import compute_baseline

DEFAULT_PREOP_WEIGHTS = {
    "age": 0.6,
    "male": 0.3,
    "ckd": 1.2,
    "diabetes": 0.4,
    "hypertension": 0.3,
    "chf": 0.6,
    "emergency": 0.5,
    "vascular_disease": 0.4,
    "bun": 0.5,
    "hemoglobin": 0.5,
    "surgery_type": 1.0,
}

DEFAULT_INTRAOP_WEIGHTS = {
    "hypotension": 0.9,
    "tachycardia": 0.4,
    "bleeding": 0.5,
    "oliguria": 0.4,
}

SURGERY_TYPE_EFFECT = {
    "cardiac": 1.0, "vascular": 0.8, "thoracic": 0.5, "urology": 0.3,
    "general": 0.2, "other": 0.0, "neuro": -0.2, "orthopedic": -0.3,
}
SURGERY_TYPE_P = [0.14, 0.12, 0.08, 0.08, 0.22, 0.10, 0.10, 0.16]

ADMISSION_SOURCES = ("clinic", "emergency_room", "transfer")
INSURANCE = ("medicare", "medicaid", "private", "uninsured")

# events with onset inside 72h; the rest fall in (72h, 168h]
EARLY_ONSET_FRACTION = 0.85
# non-events (by day 7) that develop AKI later in the stay
LATE_AKI_FRACTION = 0.10
RRT_FRACTION = 0.08


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 3000
    seed: int = 0
    target_prevalence_7day: float = 0.40
    preop_effect_weights: dict = field(default_factory=lambda: dict(DEFAULT_PREOP_WEIGHTS))
    intraop_effect_weights: dict = field(default_factory=lambda: dict(DEFAULT_INTRAOP_WEIGHTS))
    sampling_interval_min: float = 3.0
    artifact_rate: float = 0.01

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if not 0.0 < self.target_prevalence_7day < 1.0:
            raise ValueError("target_prevalence_7day must lie in (0, 1)")
        for group in (self.preop_effect_weights, self.intraop_effect_weights):
            for k, w in group.items():
                if not np.isfinite(w):
                    raise ValueError(f"effect weight {k!r} is not finite")
        unknown = set(self.preop_effect_weights) - set(DEFAULT_PREOP_WEIGHTS)
        unknown |= set(self.intraop_effect_weights) - set(DEFAULT_INTRAOP_WEIGHTS)
        if unknown:
            raise ValueError(f"unknown effect weights: {sorted(unknown)}")
        if not self.sampling_interval_min > 0:
            raise ValueError("sampling_interval_min must be positive")

    def with_zero_intraop(self):
        return replace(self, intraop_effect_weights=dict.fromkeys(DEFAULT_INTRAOP_WEIGHTS, 0.0))

    def with_zero_preop(self):
        return replace(self, preop_effect_weights=dict.fromkeys(DEFAULT_PREOP_WEIGHTS, 0.0))


def _rng(seed, index, purpose):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), index, purpose]))


_DRAW, _OUTCOME, _SERIES = 1, 2, 3


def _draw_patient(rng):
    """Preoperative covariates and intraoperative latent traits of one patient."""
    d = {}
    d["age"] = float(np.clip(rng.normal(60.0, 15.0), 18.0, 95.0))
    d["male"] = bool(rng.random() < 0.60)
    d["race_black"] = bool(rng.random() < 0.15)
    d["ckd"] = bool(rng.random() < 0.10)
    d["diabetes"] = bool(rng.random() < 0.25)
    d["hypertension"] = bool(rng.random() < 0.50)
    d["chf"] = bool(rng.random() < 0.12)
    d["emergency"] = bool(rng.random() < 0.20)
    d["vascular_disease"] = bool(rng.random() < 0.15)
    d["bmi"] = float(np.clip(rng.normal(28.0, 6.0), 15.0, 60.0))
    d["hemoglobin"] = float(np.clip(rng.normal(12.5, 2.0), 6.0, 18.0))
    d["bun"] = float(np.exp(rng.normal(np.log(17.0), 0.45)))
    d["charlson"] = float(rng.poisson(2.0))
    d["surgery_type"] = str(rng.choice(list(SURGERY_TYPE_EFFECT), p=SURGERY_TYPE_P))
    d["admission_source"] = str(rng.choice(ADMISSION_SOURCES, p=[0.6, 0.25, 0.15]))
    d["insurance"] = str(rng.choice(INSURANCE, p=[0.4, 0.15, 0.4, 0.05]))
    for trait in DEFAULT_INTRAOP_WEIGHTS:
        d["latent_" + trait] = float(rng.normal())
    return d


def _preop_terms(d):
    age_z = (d["age"] - 60.0) / 15.0
    return {
        "age": age_z + 0.35 * max(0.0, (d["age"] - 70.0) / 10.0) ** 2,
        "male": float(d["male"]),
        "ckd": float(d["ckd"]),
        "diabetes": float(d["diabetes"]),
        "hypertension": float(d["hypertension"]),
        "chf": float(d["chf"]),
        "emergency": float(d["emergency"]),
        "vascular_disease": float(d["vascular_disease"]),
        "bun": np.log(d["bun"] / 17.0) / 0.45,
        "hemoglobin": max(0.0, 11.5 - d["hemoglobin"]) / 1.5 - 0.2,
        "surgery_type": SURGERY_TYPE_EFFECT[d["surgery_type"]],
    }


def _linear_predictors(draws, cfg):
    pre = np.array([sum(cfg.preop_effect_weights.get(k, 0.0) * v
                        for k, v in _preop_terms(d).items()) for d in draws])
    intra = np.array([sum(cfg.intraop_effect_weights.get(k, 0.0) * d["latent_" + k]
                          for k in DEFAULT_INTRAOP_WEIGHTS) for d in draws])
    return pre, intra


def calibrate_intercept(linear_predictor, target, tol=1e-3, max_iter=100, bracket=(-30.0, 30.0)):
    """Intercept b with mean(logistic(b + lp)) == target, by bisection."""
    lp = np.asarray(linear_predictor, dtype=np.float64)
    lo, hi = bracket
    f = lambda b: float(expit(b + lp).mean()) - target
    if f(lo) > 0 or f(hi) < 0:
        raise InfeasiblePrevalence(f"target prevalence {target} not bracketed by {bracket}")
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) < tol:
            return mid
        if fm < 0:
            lo = mid
        else:
            hi = mid
    if abs(f(mid)) >= tol:
        raise InfeasiblePrevalence(f"bisection did not reach tolerance {tol}")
    return mid


def _ar1(rng, n, mean, phi, sigma):
    eps = rng.normal(0.0, sigma, size=n)
    x0 = rng.normal(0.0, sigma / np.sqrt(1 - phi ** 2))
    dev, _ = lfilter([1.0], [1.0, -phi], eps, zi=[phi * x0])
    return mean + dev


def _series(rng, d, start, end, cfg):
    step = cfg.sampling_interval_min
    # monitors run a little before and after the surgery window
    t = np.arange(start - 10.0, end + 10.0 + 1e-9, step)
    n = t.size
    h, tach = d["latent_hypotension"], d["latent_tachycardia"]
    map_ = _ar1(rng, n, 85.0 - 9.0 * h + rng.normal(0, 4.0), 0.9, 4.0)
    sbp = map_ + 35.0 + 0.3 * (map_ - 85.0) + rng.normal(0, 3.0, n)
    dbp = map_ - 17.0 - 0.2 * (map_ - 85.0) + rng.normal(0, 3.0, n)
    hr = _ar1(rng, n, 75.0 + 8.0 * tach + rng.normal(0, 5.0), 0.9, 3.0)
    mac = _ar1(rng, n, max(0.3, 0.9 + rng.normal(0, 0.15)), 0.95, 0.05)
    out = {}
    for name, v in (("map", map_), ("sbp", sbp), ("dbp", dbp), ("hr", hr), ("mac", mac)):
        lo, hi = DEFAULT_SIGNAL_RANGES[name]
        v = np.clip(v, lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo))
        v = np.round(v, 2 if name == "mac" else 1)
        # monitor artifacts: flushes, disconnections
        art = rng.random(n) < cfg.artifact_rate
        if art.any():
            v = v.copy()
            v[art] = np.where(rng.random(art.sum()) < 0.5, hi * 1.2, 0.0)
        tt = t
        if rng.random() < 0.1:
            # a duplicated timestamp with a slightly different reading
            k = int(rng.integers(1, n - 1))
            tt = np.insert(t, k, t[k])
            v = np.insert(v, k, v[k] + rng.normal(0, 1.0))
        out[name] = TimeSeries(name, tt, v, DEFAULT_SIGNAL_RANGES[name])
    return out


def _intraop_extras(rng, d, start, end):
    h, bleed, olig = d["latent_hypotension"], d["latent_bleeding"], d["latent_oliguria"]
    dur = end - start

    def obs(k, mean, sd, lo, hi, ndigits=2):
        times = np.sort(rng.uniform(start, end, size=k))
        vals = np.clip(rng.normal(mean, sd, size=k), lo, hi)
        return tuple((round(float(a), 1), round(float(b), ndigits)) for a, b in zip(times, vals))

    k = lambda: int(rng.integers(1, 6))
    labs = {
        "lactate": obs(k(), 1.3 + 0.45 * bleed + 0.2 * h, 0.5, 0.3, 12.0),
        "hemoglobin": obs(k(), 11.0 - 0.9 * bleed, 1.0, 5.0, 17.0, 1),
        "glucose": obs(k(), 130.0, 25.0, 50.0, 400.0, 0),
        "potassium": obs(k(), 4.1, 0.4, 2.5, 6.5),
        "spo2": obs(k(), 98.0, 1.5, 85.0, 100.0, 0),
        "fio2": obs(k(), 0.5, 0.08, 0.21, 1.0),
    }
    if rng.random() < 0.7:
        labs["po2"] = obs(k(), 220.0 - 15.0 * h, 60.0, 50.0, 500.0, 0)
    meds = {
        "pressors": bool(rng.random() < expit(-1.2 + 1.3 * h)),
        "diuretics": bool(rng.random() < 0.15),
        "beta_blockers": bool(rng.random() < 0.20),
        "vasodilators": bool(rng.random() < 0.10),
    }
    ebl = float(np.exp(rng.normal(np.log(300.0) + 0.5 * bleed, 0.5)))
    blood = float(np.exp(rng.normal(np.log(600.0), 0.4))) if rng.random() < expit(-1.5 + 1.5 * bleed) else 0.0
    totals = {
        "ebl_ml": round(ebl, 0),
        "blood_products_ml": round(blood, 0),
        "fluids_ml": round(max(300.0, 1500.0 + 3.0 * dur + 0.8 * ebl + rng.normal(0, 400.0)), 0),
        "urine_ml": round(float(np.exp(rng.normal(np.log(450.0) - 0.4 * olig + 0.001 * dur, 0.35))), 0),
    }
    return labs, meds, totals


def _creatinine_history(rng, d):
    true_b = np.exp(rng.normal(np.log(0.85 if not d["male"] else 1.0), 0.15))
    if d["ckd"]:
        true_b = np.exp(rng.normal(np.log(1.9), 0.25))
    pts = []
    if d["ckd"] or rng.random() < 0.65:
        for _ in range(int(rng.integers(1, 4))):
            pts.append((round(float(rng.uniform(1.0, 360.0)), 1),
                        round(float(true_b * (1.0 + rng.uniform(0.0, 0.2))), 2)))
        if rng.random() < 0.3:
            # outside the one-year window, ignored by the baseline rule
            pts.append((round(float(rng.uniform(400.0, 900.0)), 1), round(float(true_b * 0.8), 2)))
    return tuple(sorted(pts))


def _postop_trajectory(rng, b, aki7):
    """Creatinine series (hours after surgery end) realizing the planted outcome.

    Returns (points, rrt_flag).  Before onset every value stays within
    [b - 0.08, b + 0.10], so no criterion can fire; at onset the value jumps
    above 1.5 x baseline.
    """
    los = float(rng.uniform(60.0, 480.0))
    onset = None
    if aki7:
        if rng.random() < EARLY_ONSET_FRACTION:
            onset = float(rng.uniform(6.0, 72.0))
        else:
            onset = float(rng.uniform(72.5, 168.0))
        los = max(los, onset + 24.0)
    elif rng.random() < LATE_AKI_FRACTION:
        onset = float(rng.uniform(170.0, 400.0))
        los = max(los, onset + 24.0)
    times = list(np.arange(rng.uniform(2.0, 10.0), los, 24.0))
    if onset is not None:
        times = [t for t in times if t < onset] + [onset]
        times += list(np.arange(onset + 24.0, los, 24.0))
    pts = []
    lo = max(0.05, b - 0.08)
    for t in times:
        if onset is not None and t >= onset:
            v = max(1.6 * b, b + 0.45) + rng.uniform(0.0, 0.3 * b)
            v = max(v, 1.5 * b + 0.02)
        else:
            v = rng.uniform(lo, b + 0.10)
        pts.append((round(float(t), 2), float(v)))
    # round values away from the decision boundaries
    pts = [(t, round(v, 3)) for t, v in pts]
    pts = [(t, v if (onset is not None and t >= onset) else min(max(v, lo), b + 0.10))
           for t, v in pts]
    rrt = bool(aki7 and onset is not None and onset <= 72.0 and rng.random() < RRT_FRACTION)
    return tuple(pts), rrt


def generate_synthetic_cohort(cfg: SynthConfig) -> Cohort:
    """Deterministic synthetic cohort; see module docstring for the generative model."""
    draws = [_draw_patient(_rng(cfg.seed, i, _DRAW)) for i in range(cfg.n_patients)]
    pre, intra = _linear_predictors(draws, cfg)
    b0 = calibrate_intercept(pre + intra, cfg.target_prevalence_7day)
    prob = expit(b0 + pre + intra)

    patients = []
    for i, d in enumerate(draws):
        ro = _rng(cfg.seed, i, _OUTCOME)
        aki7 = bool(ro.random() < prob[i])
        rs = _rng(cfg.seed, i, _SERIES)
        start = round(float(rs.uniform(0.0, 30.0)), 1)
        duration = float(np.clip(np.exp(rs.normal(np.log(380.0) + 0.1 * d["latent_bleeding"], 0.3)),
                                 120.0, 900.0))
        end = round(start + duration, 1)
        series = _series(rs, d, start, end, cfg)
        labs, meds, totals = _intraop_extras(rs, d, start, end)
        record = PatientRecord(
            patient_id=f"P{i:06d}",
            age=round(d["age"], 1),
            sex="male" if d["male"] else "female",
            race_black=d["race_black"],
            ckd_documented=d["ckd"],
            rrt_postop=False,
            surgery_start_min=start,
            surgery_end_min=end,
            preop_categoricals={"surgery_type": d["surgery_type"],
                                "admission_source": d["admission_source"],
                                "insurance": d["insurance"]},
            preop_binaries={k: d[k] for k in ("diabetes", "hypertension", "chf",
                                              "emergency", "vascular_disease")},
            preop_numerics={"bmi": round(d["bmi"], 1), "hemoglobin": round(d["hemoglobin"], 1),
                            "bun": round(d["bun"], 1), "charlson": d["charlson"]},
            creatinine_history=_creatinine_history(ro, d),
            series=series,
            intraop_labs=labs,
            intraop_meds=meds,
            totals=totals,
        )
        baseline = compute_baseline(record).value
        postop, rrt = _postop_trajectory(ro, baseline, aki7)
        patients.append(replace(record, postop_creatinine=postop, rrt_postop=rrt))
    return Cohort(tuple(patients), dict(DEFAULT_SIGNAL_RANGES))
