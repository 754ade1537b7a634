"""Data-engineering rules: tail imputation, categorical encoding, series cleaning."""
from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .cohort import TimeSeries
from .errors import DegenerateOutcome

TAIL_MIN_SIZE = 20
MIN_USABLE_SAMPLES = 31
ROBUST_SD_SCALE = 1.4826


def substream(seed, name):
    """Generator keyed by (seed, name) so column order never matters."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]))


def percentiles(values, q):
    """Linear-interpolation percentiles; the single quantile rule used package-wide."""
    return np.percentile(values, q, method="linear")


def impute_tails(values, seed, name="", report=None):
    """Replace the outer 1% tails with uniform draws from inner percentile bands.

    Values above the 99th percentile are redrawn from U[p95, p99.5] and values
    below the 1st percentile from U[p0.5, p5].  Percentiles come from the
    finite entries of the original vector; NaNs pass through untouched.  With
    fewer than 20 finite values the input is returned unchanged.
    """
    x = np.array(values, dtype=np.float64)
    finite = np.isfinite(x)
    if finite.sum() < TAIL_MIN_SIZE:
        return x
    p05, p1, p5, p95, p99, p995 = percentiles(x[finite], [0.5, 1, 5, 95, 99, 99.5])
    hi = finite & (x > p99)
    lo = finite & (x < p1)
    rng = substream(seed, name)
    # draw both bands unconditionally so the stream does not depend on counts
    hi_draw = rng.uniform(p95, p995, size=x.size)
    lo_draw = rng.uniform(p05, p5, size=x.size)
    x[hi] = np.clip(hi_draw[hi], p95, p995)
    x[lo] = np.clip(lo_draw[lo], p05, p5)
    if report is not None:
        report.add_tail(name, int(lo.sum()), int(hi.sum()))
    return x


# -- categorical encoding -----------------------------------------------------

@dataclass
class CategoricalEncoder:
    """Log-likelihood-ratio encoding of one categorical variable.

    ``encode(level)`` is ``ln P(X=level | Y=1) / P(X=level | Y=0)`` with
    Laplace smoothing ``alpha`` on the per-level counts.  Levels never seen
    during fitting encode to 0.
    """

    name: str
    counts: dict = field(default_factory=dict)  # level -> (events, nonevents)
    alpha: float = 1.0
    n_events: int = 0
    n_nonevents: int = 0
    fitted: bool = False

    def encode(self, level):
        if level not in self.counts:
            return 0.0
        ev, non = self.counts[level]
        k = len(self.counts)
        p1 = (ev + self.alpha) / (self.n_events + self.alpha * k)
        p0 = (non + self.alpha) / (self.n_nonevents + self.alpha * k)
        return math.log(p1 / p0)

    def encode_many(self, levels):
        return np.array([self.encode(lv) for lv in levels], dtype=np.float64)

    def state_hash(self):
        payload = json.dumps([self.name, sorted(self.counts.items()), self.alpha,
                              self.n_events, self.n_nonevents], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_dict(self):
        return {"name": self.name, "alpha": self.alpha, "n_events": self.n_events,
                "n_nonevents": self.n_nonevents,
                "counts": {k: list(v) for k, v in sorted(self.counts.items())}}


def fit_categorical_encoder(levels, outcomes, alpha=1.0, name=""):
    levels = list(levels)
    y = np.asarray(outcomes, dtype=bool)
    if len(levels) != y.size:
        raise ValueError("levels and outcomes differ in length")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    n1 = int(y.sum())
    n0 = int(y.size - n1)
    if n1 == 0 or n0 == 0:
        raise DegenerateOutcome(f"encoder {name!r}: training outcome has a single class")
    counts = {}
    for lv, yy in zip(levels, y):
        ev, non = counts.get(lv, (0, 0))
        counts[lv] = (ev + 1, non) if yy else (ev, non + 1)
    return CategoricalEncoder(name, counts, float(alpha), n1, n0, True)


# -- time-series cleaning -----------------------------------------------------

SERIES_COUNTERS = ("original_samples", "truncated_samples", "duplicates_merged",
                   "range_rejected", "tail_rejected", "knn_repaired", "peaks_smoothed",
                   "unusable")


@dataclass
class CleaningReport:
    """Audit counts of every cleaning rule, per signal and per variable."""

    signals: dict = field(default_factory=dict)
    variables: dict = field(default_factory=dict)

    def add_series(self, signal, counts):
        acc = self.signals.setdefault(signal, dict.fromkeys(SERIES_COUNTERS, 0))
        for k, v in counts.items():
            acc[k] += int(v)

    def add_tail(self, variable, low, high):
        acc = self.variables.setdefault(variable, {"tail_imputed_low": 0,
                                                   "tail_imputed_high": 0})
        acc["tail_imputed_low"] += int(low)
        acc["tail_imputed_high"] += int(high)

    def merge(self, other):
        for s, c in other.signals.items():
            self.add_series(s, c)
        for v, c in other.variables.items():
            self.add_tail(v, c["tail_imputed_low"], c["tail_imputed_high"])
        return self

    def to_json(self):
        return json.dumps({"signals": self.signals, "variables": self.variables},
                          sort_keys=True, indent=2)


def moving_average(values, window):
    """Centered moving average by sample index; the window shrinks at the edges."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n == 0:
        return x.copy()
    left = (window - 1) // 2
    right = window // 2
    idx = np.arange(n)
    lo = np.maximum(idx - left, 0)
    hi = np.minimum(idx + right, n - 1) + 1
    csum = np.concatenate([[0.0], np.cumsum(x)])
    return (csum[hi] - csum[lo]) / (hi - lo)


def robust_sd(x):
    med = np.median(x)
    mad = np.median(np.abs(x - med))
    if mad > 0:
        return med, ROBUST_SD_SCALE * mad
    # more than half the samples equal: fall back to the mean absolute deviation
    return med, math.sqrt(math.pi / 2) * float(np.mean(np.abs(x - med)))


def _knn_repair(times, values, flagged, k=5):
    good = np.flatnonzero(~flagged)
    out = values.copy()
    if good.size == 0:
        return out, 0
    repaired = 0
    for i in np.flatnonzero(flagged):
        dist = np.abs(times[good] - times[i])
        # nearest first; equal distance prefers the later sample
        order = np.lexsort((-times[good], dist))[:k]
        out[i] = values[good[order]].mean()
        repaired += 1
    return out, repaired


def clean_time_series(ts: TimeSeries, surgery_start, surgery_end, window_w=15,
                      extreme_sd=4.0, peak_sd=3.0, tail_fraction=0.005,
                      min_samples=MIN_USABLE_SAMPLES):
    """Apply the cleaning pipeline to one series.

    Returns ``(cleaned, report, usable)``.  Repairs only ever change values;
    the cleaned timestamps are a strictly increasing subset of the input.
    """
    counts = dict.fromkeys(SERIES_COUNTERS, 0)
    t = ts.times
    v = ts.values
    counts["original_samples"] = t.size

    keep = (t >= surgery_start) & (t <= surgery_end) & np.isfinite(v)
    counts["truncated_samples"] = int((~keep).sum())
    t, v = t[keep], v[keep]

    if t.size:
        uniq, inverse, n_at = np.unique(t, return_inverse=True, return_counts=True)
        if uniq.size < t.size:
            v = np.bincount(inverse, weights=v) / n_at
            counts["duplicates_merged"] = int(t.size - uniq.size)
            t = uniq

    lo, hi = ts.valid_range
    ok = (v >= lo) & (v <= hi)
    counts["range_rejected"] = int((~ok).sum())
    t, v = t[ok], v[ok]

    # only when the tail holds at least one whole sample
    if t.size * tail_fraction >= 1:
        q_lo, q_hi = percentiles(v, [100 * tail_fraction, 100 * (1 - tail_fraction)])
        ok = (v >= q_lo) & (v <= q_hi)
        counts["tail_rejected"] = int((~ok).sum())
        t, v = t[ok], v[ok]

    if t.size >= 3:
        med, rsd = robust_sd(v)
        if rsd > 0:
            flagged = np.abs(v - med) > extreme_sd * rsd
            if flagged.any():
                v, counts["knn_repaired"] = _knn_repair(t, v, flagged)

        med, rsd = robust_sd(v)
        if rsd > 0:
            mid = v[1:-1]
            up = (mid - v[:-2] > peak_sd * rsd) & (mid - v[2:] > peak_sd * rsd)
            down = (v[:-2] - mid > peak_sd * rsd) & (v[2:] - mid > peak_sd * rsd)
            peaks = np.flatnonzero(up | down) + 1
            if peaks.size:
                smooth = moving_average(v, window_w)
                v = v.copy()
                v[peaks] = smooth[peaks]
                counts["peaks_smoothed"] = int(peaks.size)

    usable = t.size >= min_samples
    counts["unusable"] = int(not usable)
    report = CleaningReport()
    report.add_series(ts.signal_name, counts)
    return ts.with_samples(t, v), report, usable
