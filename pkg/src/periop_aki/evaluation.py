"""Discrimination, stratification and reclassification metrics with bootstrap CIs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ResampleDegenerate, RowMisalignment, SingleClass

REPORT_SCHEMA_VERSION = 1
MODEL_NAMES = ("intraop_only", "preop_only", "proposed", "full")
METRICS = ("auc", "accuracy", "sensitivity", "specificity", "ppv", "npv")


def _check_binary(labels):
    y = np.asarray(labels).astype(bool)
    n1 = int(y.sum())
    if n1 == 0 or n1 == y.size:
        raise SingleClass("both classes are required")
    return y


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def points(self):
        return [(float(f), float(t), float(h)) for f, t, h in zip(self.fpr, self.tpr, self.thresholds)]


def auc_score(scores, labels):
    """Mann-Whitney AUROC from average ranks (ties count one half)."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    n1 = y.sum()
    n0 = y.size - n1
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def roc_curve(scores, labels):
    """Threshold sweep over unique scores; a case is positive when score >= threshold."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_run]
    fp = np.cumsum(~y_sorted)[last_of_run]
    fpr = np.r_[0.0, fp / (~y).sum()]
    tpr = np.r_[0.0, tp / y.sum()]
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    return RocCurve(fpr, tpr, thresholds, auc_score(s, y))


def auroc(scores, labels):
    """Returns ``(auc, RocCurve)``."""
    curve = roc_curve(scores, labels)
    return curve.auc, curve


def youden_cutoff(scores, labels):
    """Observed score maximizing sensitivity + specificity - 1 (ties: smallest score)."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    cand = np.unique(s)  # ascending
    order = np.sort(s[y])
    neg = np.sort(s[~y])
    # positives/negatives at or above each candidate
    tp = y.sum() - np.searchsorted(order, cand, side="left")
    tn = np.searchsorted(neg, cand, side="left")
    j = tp / y.sum() + tn / (~y).sum() - 1.0
    best = j.max()
    # first index of the maximum in ascending order = smallest threshold
    return float(cand[np.flatnonzero(j >= best - 1e-12)[0]])


@dataclass(frozen=True)
class ClassificationTable:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def _ratio(a, b):
        return a / b if b else None

    @property
    def accuracy(self):
        return self._ratio(self.tp + self.tn, self.n)

    @property
    def sensitivity(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return self._ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self):
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self):
        return self._ratio(self.tn, self.tn + self.fn)

    def as_dict(self):
        d = asdict(self)
        for k in ("accuracy", "sensitivity", "specificity", "ppv", "npv"):
            d[k] = getattr(self, k)
        return d


def classification_metrics(scores, labels, threshold):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.size == 0 or s.size != y.size:
        raise ValueError("scores and labels must be non-empty and of equal length")
    high = s >= threshold
    return ClassificationTable(tp=int((high & y).sum()), fp=int((high & ~y).sum()),
                               tn=int((~high & ~y).sum()), fn=int((~high & y).sum()))


@dataclass(frozen=True)
class NriResult:
    event_up: int
    event_down: int
    nonevent_up: int
    nonevent_down: int
    n_events: int
    n_nonevents: int
    nri: float
    z: float
    p_value: float


def nri(labels, old_risk, new_risk):
    """Two-category net reclassification improvement of ``new_risk`` over ``old_risk``.

    The p-value is the two-sided asymptotic normal test with variance
    (up + down) / n^2 summed over events and nonevents.
    """
    y = _check_binary(labels)
    old = np.asarray(old_risk).astype(bool)
    new = np.asarray(new_risk).astype(bool)
    if not (old.size == new.size == y.size):
        raise ValueError("labels and risk vectors must have equal length")
    up = new & ~old
    down = old & ~new
    ne, nn = int(y.sum()), int((~y).sum())
    eu, ed = int((up & y).sum()), int((down & y).sum())
    nu, nd = int((up & ~y).sum()), int((down & ~y).sum())
    value = (eu - ed) / ne + (nd - nu) / nn
    var = (eu + ed) / ne ** 2 + (nu + nd) / nn ** 2
    if var > 0:
        z = value / math.sqrt(var)
        p = float(2.0 * norm.sf(abs(z)))
    else:
        z, p = 0.0, 1.0
    return NriResult(eu, ed, nu, nd, ne, nn, value, z, p)


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lo: float
    hi: float
    n_resamples: int
    seed: int


def _resampled_stats(statistic_fn, data, n_resamples, seed, max_retries=50):
    arrays = [np.asarray(a) for a in data]
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("all data arrays must share their first dimension")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB007]))
    out = []
    for _ in range(n_resamples):
        for _attempt in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            try:
                out.append(statistic_fn(*[a[idx] for a in arrays]))
                break
            except SingleClass:
                continue
        else:
            raise ResampleDegenerate(f"no valid resample after {max_retries} retries")
    return np.asarray(out, dtype=np.float64)


def bootstrap_ci(statistic_fn, data, n_resamples=1000, seed=0, level=0.95):
    """Percentile bootstrap CI; ``data`` is a tuple of arrays resampled jointly by row."""
    if n_resamples < 1:
        raise ValueError("n_resamples must be positive")
    point = float(statistic_fn(*data))
    stats = _resampled_stats(statistic_fn, data, n_resamples, seed)
    a = (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [100 * a, 100 * (1 - a)], method="linear")
    return BootstrapCI(point, float(lo), float(hi), int(n_resamples), int(seed))


def bootstrap_cis(statistic_fn, data, names, n_resamples=1000, seed=0, level=0.95):
    """Like :func:`bootstrap_ci` for a statistic returning a vector; NaN entries are
    ignored per component."""
    point = np.asarray(statistic_fn(*data), dtype=np.float64)
    stats = _resampled_stats(statistic_fn, data, n_resamples, seed)
    a = (1.0 - level) / 2.0
    out = {}
    for k, name in enumerate(names):
        col = stats[:, k]
        col = col[np.isfinite(col)]
        if col.size:
            lo, hi = np.percentile(col, [100 * a, 100 * (1 - a)], method="linear")
        else:
            lo = hi = math.nan
        out[name] = BootstrapCI(float(point[k]), float(lo), float(hi), int(n_resamples), int(seed))
    return out


# -- report -------------------------------------------------------------------

def _none_nan(x):
    return math.nan if x is None else x


def _metric_vector(threshold):
    def stat(scores, labels):
        table = classification_metrics(scores, labels, threshold)
        return [auc_score(scores, labels)] + [
            _none_nan(getattr(table, m)) for m in METRICS[1:]]
    return stat


def _ci_dict(ci):
    return {"point": _clean(ci.point), "lo": _clean(ci.lo), "hi": _clean(ci.hi)}


def _clean(x):
    if x is None:
        return None
    x = float(x)
    return None if not math.isfinite(x) else x


def reclassification_flows(labels, old_risk, new_risk):
    """Counts of (old -> new) risk moves, separately for events and nonevents."""
    y = np.asarray(labels).astype(bool)
    old = np.asarray(old_risk).astype(bool)
    new = np.asarray(new_risk).astype(bool)
    flows = {}
    for group, mask in (("event", y), ("nonevent", ~y)):
        for o in (False, True):
            for nw in (False, True):
                key = f"{group}:{'high' if o else 'low'}->{'high' if nw else 'low'}"
                flows[key] = int((mask & (old == o) & (new == nw)).sum())
    return flows


def build_report(results, n_resamples=1000, seed=0, reference="preop_only",
                 candidate="proposed"):
    """Assemble the evaluation report.

    ``results`` maps outcome -> {"ids": test ids, "labels": test labels,
    "models": {name: {"test_scores", "cutoff"}}}.  Cutoffs are fixed before
    this call (from training data); the test set is only scored.
    """
    report = {"schema_version": REPORT_SCHEMA_VERSION,
              "threshold_rule": "high risk iff score >= cutoff",
              "ci_method": "percentile bootstrap",
              "nri_p_value_method": "asymptotic normal test (two-category NRI)",
              "n_resamples": int(n_resamples), "outcomes": {}}
    for o_idx, (outcome, res) in enumerate(sorted(results.items())):
        y = np.asarray(res["labels"]).astype(bool)
        block = {"n_test": int(y.size), "n_events": int(y.sum()), "models": {}, "roc": {}}
        risk = {}
        for m_idx, (name, m) in enumerate(sorted(res["models"].items())):
            s = np.asarray(m["test_scores"], dtype=np.float64)
            if s.size != y.size:
                raise RowMisalignment(f"{outcome}/{name}: {s.size} scores for {y.size} labels")
            cutoff = float(m["cutoff"])
            cis = bootstrap_cis(_metric_vector(cutoff), (s, y), METRICS, n_resamples,
                                seed=seed + 1000 * o_idx + m_idx)
            table = classification_metrics(s, y, cutoff)
            block["models"][name] = {
                "cutoff": cutoff,
                "table": {k: _clean(v) if isinstance(v, float) or v is None else v
                          for k, v in table.as_dict().items()},
                "metrics": {k: _ci_dict(cis[k]) for k in METRICS},
            }
            block["roc"][name] = [[_clean(a), _clean(b), _clean(c)]
                                  for a, b, c in roc_curve(s, y).points()]
            risk[name] = s >= cutoff
        if reference in risk and candidate in risk:
            res_nri = nri(y, risk[reference], risk[candidate])
            ci = bootstrap_ci(lambda yy, a, b: nri(yy, a, b).nri,
                              (y, risk[reference], risk[candidate]), n_resamples,
                              seed=seed + 1000 * o_idx + 999)
            block["nri"] = {"reference": reference, "candidate": candidate,
                            **{k: _clean(v) if isinstance(v, float) else v
                               for k, v in asdict(res_nri).items()},
                            "ci": _ci_dict(ci)}
            block["reclassification"] = reclassification_flows(
                y, risk[reference], risk[candidate])
        report["outcomes"][outcome] = block
    return report
