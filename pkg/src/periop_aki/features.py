"""Intraoperative and preoperative feature extraction and matrix assembly."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import Cohort, TOTAL_NAMES
from .errors import EmptyCohort, EmptyLab, NoOxygenData, SeriesUnusable
from .preprocessing import (MIN_USABLE_SAMPLES, CleaningReport, clean_time_series,
                            fit_categorical_encoder, impute_tails, moving_average)

INF = math.inf

DEFAULT_OCCUPANCY_RANGES = {
    "map": [(-INF, 55.0), (-INF, 65.0)],
    "sbp": [(-INF, 90.0)],
    "dbp": [(-INF, 40.0)],
    "hr": [(100.0, INF)],
    "mac": [(-INF, 0.5)],
}

DEFAULT_ABNORMAL_RANGES = {
    "lactate": (0.0, 2.0),
    "hemoglobin": (10.0, 17.0),
    "glucose": (70.0, 180.0),
    "potassium": (3.5, 5.0),
    "spo2": (92.0, 100.0),
    "fio2": (0.21, 0.6),
    "po2": (80.0, 500.0),
}


@dataclass
class FeatureConfig:
    window_w: int = 15
    extreme_sd: float = 4.0
    peak_sd: float = 3.0
    tail_fraction: float = 0.005
    min_samples: int = MIN_USABLE_SAMPLES
    occupancy_ranges: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_OCCUPANCY_RANGES.items()})
    abnormal_ranges: dict = field(default_factory=lambda: dict(DEFAULT_ABNORMAL_RANGES))
    encoder_alpha: float = 1.0
    # categoricals with more levels than this get the log-ratio encoder, others one-hot
    onehot_max_levels: int = 5
    missing_threshold: float = 0.4
    seed: int = 0
    jobs: int = 1


# -- per-series statistics ----------------------------------------------------

def decompose(ts, window_w=15):
    """Split a series into a moving-average base and the residual around it."""
    base = moving_average(ts.values, window_w)
    residual = ts.values - base
    return ts.with_samples(ts.times, base), ts.with_samples(ts.times, residual)


@dataclass(frozen=True)
class SignalFeatures:
    min: float
    max: float
    mean_base: float
    sd_base: float
    sd_residual: float
    range_occupancy: dict  # (lo, hi) -> fraction of time with lo <= value < hi


def occupancy(times, values, lo, hi):
    """Fraction of covered time spent in [lo, hi); each sample owns the gap to the next."""
    if times.size < 2:
        return float(lo <= values[0] < hi) if times.size else math.nan
    gaps = np.diff(times)
    inside = (values[:-1] >= lo) & (values[:-1] < hi)
    return float(gaps[inside].sum() / gaps.sum())


def signal_features(ts, window_w=15, ranges=(), min_samples=MIN_USABLE_SAMPLES):
    if len(ts) < max(min_samples, 1):
        raise SeriesUnusable(f"{ts.signal_name}: {len(ts)} samples")
    base, resid = decompose(ts, window_w)
    occ = {(lo, hi): occupancy(ts.times, ts.values, lo, hi) for lo, hi in ranges}
    return SignalFeatures(
        min=float(ts.values.min()),
        max=float(ts.values.max()),
        mean_base=float(base.values.mean()),
        sd_base=float(base.values.std()),
        sd_residual=float(resid.values.std()),
        range_occupancy=occ,
    )


@dataclass(frozen=True)
class LabFeatures:
    min: float
    mean: float
    max: float
    count: int
    variance: float
    abnormal_pct: float


def lab_features(obs, abnormal_range=(-INF, INF)):
    values = np.array([v for _, v in obs], dtype=np.float64)
    if values.size == 0:
        raise EmptyLab("no observations")
    lo, hi = abnormal_range
    abnormal = (values < lo) | (values > hi)
    return LabFeatures(
        min=float(values.min()),
        mean=float(values.mean()),
        max=float(values.max()),
        count=int(values.size),
        variance=float(values.var()),
        abnormal_pct=100.0 * float(abnormal.sum()) / values.size,
    )


def pf_ratio(po2, fio2, spo2=None):
    """PaO2/FiO2, falling back to (SpO2/FiO2 - 64) / 0.84 when PaO2 is missing."""
    if fio2 is None or not fio2 > 0:
        raise NoOxygenData("FiO2 must be positive")
    if po2 is not None and math.isfinite(po2):
        return po2 / fio2
    if spo2 is not None and math.isfinite(spo2):
        return (spo2 / fio2 - 64.0) / 0.84
    raise NoOxygenData("neither PO2 nor SpO2 available")


# -- cohort-level cleaning ----------------------------------------------------

def clean_cohort(cohort: Cohort, config: FeatureConfig | None = None):
    """Clean every series; unusable series are removed from the patient record.

    Returns ``(cleaned_cohort, CleaningReport)``.
    """
    config = config or FeatureConfig()
    report = CleaningReport()
    patients = []
    for p in cohort.patients:
        series = {}
        for name, ts in sorted(p.series.items()):
            cleaned, rep, usable = clean_time_series(
                ts, p.surgery_start_min, p.surgery_end_min, config.window_w,
                config.extreme_sd, config.peak_sd, config.tail_fraction, config.min_samples)
            report.merge(rep)
            if usable:
                series[name] = cleaned
        patients.append(replace(p, series=series))
    return replace(cohort, patients=tuple(patients)), report


# -- matrix -------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    """Row-per-patient numeric matrix with named columns and outcome vectors."""

    ids: list
    columns: list
    X: np.ndarray
    outcomes: dict = field(default_factory=dict)
    missing: np.ndarray | None = None
    manifest: list = field(default_factory=list)  # dicts: name, source, statistic, block

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        if self.X.shape != (len(self.ids), len(self.columns)):
            raise ValueError("matrix shape does not match ids x columns")

    def __len__(self):
        return len(self.ids)

    def col(self, name):
        return self.X[:, self.columns.index(name)]

    def select(self, columns=None, block=None, rows=None):
        if block is not None:
            columns = [m["name"] for m in self.manifest if m["block"] == block]
        cidx = [self.columns.index(c) for c in columns]
        ridx = np.arange(len(self.ids)) if rows is None else np.asarray(rows)
        man = {m["name"]: m for m in self.manifest}
        return FeatureMatrix(
            ids=[self.ids[i] for i in ridx],
            columns=list(columns),
            X=self.X[np.ix_(ridx, cidx)],
            outcomes={k: v[ridx] for k, v in self.outcomes.items()},
            missing=None if self.missing is None else self.missing[np.ix_(ridx, cidx)],
            manifest=[man[c] for c in columns if c in man],
        )

    def rows_for(self, ids):
        pos = {pid: i for i, pid in enumerate(self.ids)}
        return self.select(self.columns, rows=[pos[i] for i in ids])

    def with_column(self, name, values, source="", statistic="", block="stacked"):
        X = np.column_stack([self.X, np.asarray(values, dtype=np.float64)])
        miss = None
        if self.missing is not None:
            miss = np.column_stack([self.missing, np.zeros(len(self.ids), dtype=bool)])
        return FeatureMatrix(list(self.ids), self.columns + [name], X, dict(self.outcomes), miss,
                             self.manifest + [{"name": name, "source": source,
                                               "statistic": statistic, "block": block}])

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            outs = sorted(self.outcomes)
            w.writerow(["patient_id"] + self.columns + outs)
            for i, pid in enumerate(self.ids):
                w.writerow([pid] + [repr(float(x)) for x in self.X[i]]
                           + [int(self.outcomes[o][i]) for o in outs])

    def manifest_json(self):
        return json.dumps(self.manifest, indent=2, sort_keys=True)


def _range_tag(lo, hi):
    if lo == -INF:
        return f"lt{hi:g}"
    if hi == INF:
        return f"ge{lo:g}"
    return f"{lo:g}to{hi:g}"


def _patient_raw_features(p, config):
    """{column: (value, source, statistic, block, kind)} for one patient."""
    f = {}

    def put(name, value, source, stat, block, kind):
        f[name] = (value, source, stat, block, kind)

    put("age", p.age, "age", "raw", "preop", "continuous")
    put("female", float(p.female), "sex", "indicator", "preop", "binary")
    put("race_black", float(p.race_black), "race_black", "indicator", "preop", "binary")
    put("ckd", float(p.ckd_documented), "ckd", "indicator", "preop", "binary")
    for k, v in p.preop_numerics.items():
        put("num_" + k, v, k, "raw", "preop", "continuous")
    for k, v in p.preop_binaries.items():
        put("bin_" + k, float(v), k, "indicator", "preop", "binary")

    for sig, ranges in sorted(config.occupancy_ranges.items()):
        ts = p.series.get(sig)
        usable = ts is not None and len(ts) >= config.min_samples
        sf = signal_features(ts, config.window_w, ranges, config.min_samples) if usable else None
        for stat in ("min", "max", "mean_base", "sd_base", "sd_residual"):
            put(f"sig_{sig}_{stat}", getattr(sf, stat) if sf else math.nan, sig, stat,
                "intraop", "signal")
        for lo, hi in ranges:
            put(f"sig_{sig}_occ_{_range_tag(lo, hi)}",
                sf.range_occupancy[(lo, hi)] if sf else math.nan, sig,
                f"occupancy[{lo},{hi})", "intraop", "signal")

    for lab, rng_ in sorted(config.abnormal_ranges.items()):
        obs = p.intraop_labs.get(lab, ())
        lf = lab_features(obs, rng_) if obs else None
        for stat in ("min", "mean", "max", "count", "variance", "abnormal_pct"):
            val = float(getattr(lf, stat)) if lf else math.nan
            if stat == "count" and lf is None:
                val = 0.0
            put(f"lab_{lab}_{stat}", val, lab, stat, "intraop", "continuous")

    labs = p.intraop_labs
    mean_of = lambda k: float(np.mean([v for _, v in labs[k]])) if labs.get(k) else None
    try:
        pf = pf_ratio(mean_of("po2"), mean_of("fio2"), mean_of("spo2"))
    except NoOxygenData:
        pf = math.nan
    put("pf_ratio", pf, "po2/fio2", "ratio", "intraop", "continuous")

    for k, v in p.intraop_meds.items():
        put("med_" + k, float(v), k, "indicator", "intraop", "binary")
    for k in TOTAL_NAMES:
        put("tot_" + k, p.totals.get(k, math.nan), k, "total", "intraop", "continuous")
    return f


def extract_raw_features(cohort: Cohort, config: FeatureConfig | None = None):
    """Per-patient feature dicts, in cohort order (parallel safe, order preserved)."""
    config = config or FeatureConfig()
    if config.jobs > 1:
        with ThreadPoolExecutor(config.jobs) as ex:
            return list(ex.map(lambda p: _patient_raw_features(p, config), cohort.patients))
    return [_patient_raw_features(p, config) for p in cohort.patients]


def fit_encoders(cohort: Cohort, outcome: str, config: FeatureConfig | None = None, train_ids=None):
    """Log-ratio encoders for categoricals with more than ``onehot_max_levels`` levels,
    fitted on ``train_ids`` only."""
    config = config or FeatureConfig()
    sub = cohort if train_ids is None else cohort.subset(train_ids)
    y = sub.outcome(outcome)
    names = sorted({k for p in sub.patients for k in p.preop_categoricals})
    encoders = {}
    for name in names:
        levels = [p.preop_categoricals.get(name, "") for p in sub.patients]
        if len(set(levels)) > config.onehot_max_levels:
            encoders[name] = fit_categorical_encoder(levels, y, config.encoder_alpha, name)
    return encoders


def assemble_matrix(cohort: Cohort, encoders, config: FeatureConfig | None = None,
                    train_ids=None, raw=None, report: CleaningReport | None = None) -> FeatureMatrix:
    """Build the imputed feature matrix for every patient of ``cohort``.

    Column selection (missingness threshold), one-hot levels and imputation
    medians are taken from the ``train_ids`` rows (all rows when omitted), so
    the test rows never influence the transformation.  Columns are sorted
    lexicographically.
    """
    config = config or FeatureConfig()
    if len(cohort) == 0:
        raise EmptyCohort("cannot assemble a matrix for an empty cohort")
    raw = raw if raw is not None else extract_raw_features(cohort, config)
    ids = cohort.ids
    train_set = set(ids if train_ids is None else train_ids)
    train_rows = np.array([pid in train_set for pid in ids])

    meta = {}
    for r in raw:
        for k, (_, src, stat, block, kind) in r.items():
            meta.setdefault(k, (src, stat, block, kind))

    cats = sorted({k for p in cohort.patients for k in p.preop_categoricals})
    cat_cols = {}
    for name in cats:
        levels = [p.preop_categoricals.get(name, "") for p in cohort.patients]
        if name in encoders:
            cat_cols["cat_" + name] = encoders[name].encode_many(levels)
            meta["cat_" + name] = (name, "log_likelihood_ratio", "preop", "encoded")
        else:
            seen = sorted({lv for lv, tr in zip(levels, train_rows) if tr})
            # first level is the reference
            for lv in seen[1:]:
                col = f"cat_{name}={lv}"
                cat_cols[col] = np.array([float(x == lv) for x in levels])
                meta[col] = (name, f"level={lv}", "preop", "binary")

    columns = sorted(meta)
    X = np.full((len(ids), len(columns)), np.nan)
    for j, c in enumerate(columns):
        if c in cat_cols:
            X[:, j] = cat_cols[c]
        else:
            X[:, j] = [r[c][0] if c in r else np.nan for r in raw]
    missing = ~np.isfinite(X)

    keep = []
    for j, c in enumerate(columns):
        miss_frac = missing[train_rows, j].mean() if train_rows.any() else 1.0
        if miss_frac <= config.missing_threshold:
            keep.append(j)
    columns = [columns[j] for j in keep]
    X = X[:, keep]
    missing = missing[:, keep]

    for j, c in enumerate(columns):
        kind = meta[c][3]
        if kind == "continuous":
            X[:, j] = impute_tails(X[:, j], config.seed, c, report)
        med = np.nanmedian(X[train_rows, j]) if np.isfinite(X[train_rows, j]).any() else 0.0
        col = X[:, j]
        col[~np.isfinite(col)] = med

    manifest = [{"name": c, "source": meta[c][0], "statistic": meta[c][1], "block": meta[c][2]}
                for c in columns]
    outcomes = {}
    if cohort.labels is not None:
        for o in ("aki_3day", "aki_7day", "aki_overall"):
            outcomes[o] = cohort.outcome(o)
    return FeatureMatrix(list(ids), columns, X, outcomes, missing, manifest)
