"""Cohort schema, CSV ingestion/serialization and the stratified train/test split."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from .errors import (DuplicatePatientId, MalformedRow, MissingColumn,
                     TooFewPerClass, UnknownSignal)

# physiologic bounds used to reject impossible samples
DEFAULT_SIGNAL_RANGES = {
    "map": (20.0, 200.0),
    "sbp": (40.0, 260.0),
    "dbp": (10.0, 160.0),
    "hr": (20.0, 220.0),
    "mac": (0.0, 3.0),
}

TOTAL_NAMES = ("blood_products_ml", "ebl_ml", "fluids_ml", "urine_ml",
               "surgery_duration_min")

PATIENT_COLUMNS = ("patient_id", "age", "sex", "race_black", "ckd", "rrt_postop",
                   "surgery_start_min", "surgery_end_min")

# column prefixes for the variable-width part of patients.csv
PREFIX_CATEGORICAL = "cat_"
PREFIX_BINARY = "bin_"
PREFIX_NUMERIC = "num_"
PREFIX_MED = "med_"
PREFIX_TOTAL = "tot_"

LAB_CREAT_HISTORY = "creatinine_history"
LAB_CREAT_POSTOP = "creatinine_postop"

OUTCOMES = ("aki_3day", "aki_7day", "aki_overall")


class TimeSeries:
    """Time-ordered samples of one physiologic signal within one surgery."""

    __slots__ = ("signal_name", "times", "values", "valid_range")

    def __init__(self, signal_name, times, values, valid_range=(-math.inf, math.inf)):
        times = np.asarray(times, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        self.signal_name = signal_name
        self.times = times
        self.values = values
        self.valid_range = (float(valid_range[0]), float(valid_range[1]))

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (self.signal_name == other.signal_name
                and self.valid_range == other.valid_range
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"TimeSeries({self.signal_name!r}, n={len(self)})"

    def with_samples(self, times, values):
        return TimeSeries(self.signal_name, times, values, self.valid_range)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: float
    sex: str
    race_black: bool
    ckd_documented: bool
    rrt_postop: bool
    surgery_start_min: float
    surgery_end_min: float
    preop_categoricals: dict = field(default_factory=dict)
    preop_binaries: dict = field(default_factory=dict)
    preop_numerics: dict = field(default_factory=dict)
    # (days_before_admission, mg/dl)
    creatinine_history: tuple = ()
    # (hours_after_surgery_end, mg/dl)
    postop_creatinine: tuple = ()
    series: dict = field(default_factory=dict)
    intraop_labs: dict = field(default_factory=dict)
    intraop_meds: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.age >= 18:
            raise ValueError(f"{self.patient_id}: age must be >= 18, got {self.age}")
        if self.sex not in ("male", "female"):
            raise ValueError(f"{self.patient_id}: sex must be 'male' or 'female'")
        if not self.surgery_end_min > self.surgery_start_min:
            raise ValueError(f"{self.patient_id}: surgery end must follow start")
        totals = dict(self.totals)
        totals["surgery_duration_min"] = self.surgery_end_min - self.surgery_start_min
        object.__setattr__(self, "totals", totals)

    @property
    def female(self):
        return self.sex == "female"


@dataclass(frozen=True)
class Cohort:
    patients: tuple
    signal_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SIGNAL_RANGES))
    # patient_id -> OutcomeLabels, attached by outcomes.label_cohort
    labels: dict | None = None
    diagnostics: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        seen = set()
        for p in self.patients:
            if p.patient_id in seen:
                raise DuplicatePatientId(p.patient_id)
            seen.add(p.patient_id)

    def __len__(self):
        return len(self.patients)

    @property
    def ids(self):
        return [p.patient_id for p in self.patients]

    def outcome(self, name):
        """Boolean outcome vector in patient order."""
        if self.labels is None:
            raise ValueError("cohort has no outcome labels attached")
        return np.array([getattr(self.labels[p.patient_id], name)
                         for p in self.patients], dtype=bool)

    def subset(self, ids):
        ids = list(ids)
        index = {p.patient_id: p for p in self.patients}
        labels = None
        if self.labels is not None:
            labels = {i: self.labels[i] for i in ids}
        return replace(self, patients=tuple(index[i] for i in ids), labels=labels,
                       diagnostics=())


# -- CSV ingestion ------------------------------------------------------------

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _parse_bool(text):
    s = text.strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"not a finite number: {text!r}")
    return value


def _read_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise MissingColumn(col, os.path.basename(str(path)))
        # header is line 1
        for line, row in enumerate(reader, start=2):
            yield line, header, row


def _parse_patient_row(row, header):
    pid = row["patient_id"].strip()
    if not pid:
        raise ValueError("empty patient_id")
    sex = row["sex"].strip().lower()
    cats, bins, nums, meds, totals = {}, {}, {}, {}, {}
    for col in header:
        raw = (row.get(col) or "").strip()
        if col.startswith(PREFIX_CATEGORICAL):
            if raw:
                cats[col[len(PREFIX_CATEGORICAL):]] = raw
        elif col.startswith(PREFIX_BINARY):
            if raw:
                bins[col[len(PREFIX_BINARY):]] = _parse_bool(raw)
        elif col.startswith(PREFIX_NUMERIC):
            if raw:
                nums[col[len(PREFIX_NUMERIC):]] = _parse_float(raw)
        elif col.startswith(PREFIX_MED):
            if raw:
                meds[col[len(PREFIX_MED):]] = _parse_bool(raw)
        elif col.startswith(PREFIX_TOTAL):
            name = col[len(PREFIX_TOTAL):]
            if raw and name != "surgery_duration_min":
                totals[name] = _parse_float(raw)
    return dict(
        patient_id=pid,
        age=_parse_float(row["age"]),
        sex=sex,
        race_black=_parse_bool(row["race_black"]),
        ckd_documented=_parse_bool(row["ckd"]),
        rrt_postop=_parse_bool(row["rrt_postop"]),
        surgery_start_min=_parse_float(row["surgery_start_min"]),
        surgery_end_min=_parse_float(row["surgery_end_min"]),
        preop_categoricals=cats,
        preop_binaries=bins,
        preop_numerics=nums,
        intraop_meds=meds,
        totals=totals,
    )


def load_cohort(patients_csv_path, timeseries_csv_path, labs_csv_path,
                signal_ranges: Mapping | None = None, strict=False) -> Cohort:
    """Read the three long-form CSV files into a :class:`Cohort`.

    Rows that fail to parse are skipped and reported as :class:`MalformedRow`
    entries in ``Cohort.diagnostics`` (``strict=True`` raises the first one
    instead).  Missing columns, duplicate patient ids and signals without a
    configured valid range always raise.
    """
    ranges = dict(DEFAULT_SIGNAL_RANGES if signal_ranges is None else signal_ranges)
    diagnostics = []

    def reject(line, reason, source):
        err = MalformedRow(line, reason, source)
        if strict:
            raise err
        diagnostics.append(err)

    base = {}
    src = os.path.basename(str(patients_csv_path))
    for line, header, row in _read_rows(patients_csv_path, PATIENT_COLUMNS):
        try:
            fields = _parse_patient_row(row, header)
            if fields["patient_id"] in base:
                raise DuplicatePatientId(fields["patient_id"])
            if not fields["age"] >= 18:
                raise ValueError(f"age {fields['age']} below 18")
            if fields["sex"] not in ("male", "female"):
                raise ValueError(f"unknown sex {row['sex']!r}")
            if not fields["surgery_end_min"] > fields["surgery_start_min"]:
                raise ValueError("surgery_end_min must exceed surgery_start_min")
        except DuplicatePatientId:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            reject(line, str(exc), src)
            continue
        base[fields["patient_id"]] = fields

    samples: dict = {}
    src = os.path.basename(str(timeseries_csv_path))
    for line, _, row in _read_rows(timeseries_csv_path, ("patient_id", "signal", "t_min", "value")):
        signal = (row["signal"] or "").strip()
        if signal and signal not in ranges:
            raise UnknownSignal(signal)
        try:
            pid = row["patient_id"].strip()
            if pid not in base:
                raise ValueError(f"unknown patient {pid!r}")
            if not signal:
                raise ValueError("empty signal name")
            t = _parse_float(row["t_min"])
            v = _parse_float(row["value"])
        except (ValueError, TypeError) as exc:
            reject(line, str(exc), src)
            continue
        samples.setdefault(pid, {}).setdefault(signal, []).append((t, v))

    history: dict = {}
    postop: dict = {}
    labs: dict = {}
    src = os.path.basename(str(labs_csv_path))
    for line, _, row in _read_rows(labs_csv_path, ("patient_id", "name", "t", "value")):
        try:
            pid = row["patient_id"].strip()
            if pid not in base:
                raise ValueError(f"unknown patient {pid!r}")
            name = (row["name"] or "").strip()
            if not name:
                raise ValueError("empty lab name")
            t = _parse_float(row["t"])
            v = _parse_float(row["value"])
            if name in (LAB_CREAT_HISTORY, LAB_CREAT_POSTOP) and (t < 0 or v <= 0):
                raise ValueError("creatinine needs t >= 0 and value > 0")
        except (ValueError, TypeError) as exc:
            reject(line, str(exc), src)
            continue
        if name == LAB_CREAT_HISTORY:
            history.setdefault(pid, []).append((t, v))
        elif name == LAB_CREAT_POSTOP:
            postop.setdefault(pid, []).append((t, v))
        else:
            labs.setdefault(pid, {}).setdefault(name, []).append((t, v))

    patients = []
    for pid, fields in base.items():
        series = {}
        for signal, pts in sorted(samples.get(pid, {}).items()):
            pts.sort(key=lambda tv: tv[0])
            t, v = zip(*pts)
            series[signal] = TimeSeries(signal, t, v, ranges[signal])
        patients.append(PatientRecord(
            **fields,
            creatinine_history=tuple(sorted(history.get(pid, []))),
            postop_creatinine=tuple(sorted(postop.get(pid, []))),
            series=series,
            intraop_labs={k: tuple(sorted(v)) for k, v in sorted(labs.get(pid, {}).items())},
        ))
    return Cohort(tuple(patients), ranges, diagnostics=tuple(diagnostics))


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    return repr(float(x))


def write_cohort(cohort: Cohort, directory) -> dict:
    """Serialize a cohort into ``patients.csv``, ``timeseries.csv`` and ``labs.csv``.

    Returns the mapping of file role to path.  Floats are written with
    ``repr`` so that :func:`load_cohort` reproduces them exactly.
    """
    os.makedirs(directory, exist_ok=True)
    cats, bins, nums, meds, tots = set(), set(), set(), set(), set()
    for p in cohort.patients:
        cats.update(p.preop_categoricals)
        bins.update(p.preop_binaries)
        nums.update(p.preop_numerics)
        meds.update(p.intraop_meds)
        tots.update(k for k in p.totals if k != "surgery_duration_min")
    header = list(PATIENT_COLUMNS)
    header += [PREFIX_CATEGORICAL + c for c in sorted(cats)]
    header += [PREFIX_BINARY + c for c in sorted(bins)]
    header += [PREFIX_NUMERIC + c for c in sorted(nums)]
    header += [PREFIX_MED + c for c in sorted(meds)]
    header += [PREFIX_TOTAL + c for c in sorted(tots)]

    paths = {k: os.path.join(directory, f"{k}.csv") for k in ("patients", "timeseries", "labs")}
    with open(paths["patients"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p in cohort.patients:
            row = [p.patient_id, _fmt(p.age), p.sex, _fmt(p.race_black), _fmt(p.ckd_documented),
                   _fmt(p.rrt_postop), _fmt(p.surgery_start_min), _fmt(p.surgery_end_min)]
            row += [p.preop_categoricals.get(c, "") for c in sorted(cats)]
            row += [_fmt(p.preop_binaries[c]) if c in p.preop_binaries else "" for c in sorted(bins)]
            row += [_fmt(p.preop_numerics[c]) if c in p.preop_numerics else "" for c in sorted(nums)]
            row += [_fmt(p.intraop_meds[c]) if c in p.intraop_meds else "" for c in sorted(meds)]
            row += [_fmt(p.totals[c]) if c in p.totals else "" for c in sorted(tots)]
            w.writerow(row)
    with open(paths["timeseries"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "signal", "t_min", "value"])
        for p in cohort.patients:
            for name, ts in sorted(p.series.items()):
                for t, v in zip(ts.times.tolist(), ts.values.tolist()):
                    w.writerow([p.patient_id, name, repr(t), repr(v)])
    with open(paths["labs"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "name", "t", "value"])
        for p in cohort.patients:
            for t, v in p.creatinine_history:
                w.writerow([p.patient_id, LAB_CREAT_HISTORY, repr(float(t)), repr(float(v))])
            for t, v in p.postop_creatinine:
                w.writerow([p.patient_id, LAB_CREAT_POSTOP, repr(float(t)), repr(float(v))])
            for name, obs in sorted(p.intraop_labs.items()):
                for t, v in obs:
                    w.writerow([p.patient_id, name, repr(float(t)), repr(float(v))])
    return paths


# -- train/test split ---------------------------------------------------------

def stratified_counts(class_sizes: Iterable[int], train_fraction: float):
    """Train count per class: round(f * n) with .5 ties going to train."""
    return [int(math.floor(train_fraction * n + 0.5)) for n in class_sizes]


def split_cohort(cohort: Cohort, train_fraction: float, seed: int,
                 outcome: str = "aki_7day") -> tuple[Cohort, Cohort]:
    """Stratified random split into (train, test) cohorts.

    Patients keep their original relative order inside each part.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    y = cohort.outcome(outcome)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917]))
    ids = np.array(cohort.ids, dtype=object)
    train_mask = np.zeros(len(ids), dtype=bool)
    for cls in (False, True):
        members = np.flatnonzero(y == cls)
        n_train = stratified_counts([members.size], train_fraction)[0]
        if n_train < 2 or members.size - n_train < 2:
            raise TooFewPerClass(
                f"class {int(cls)} has {members.size} patients; need >= 2 per side")
        chosen = rng.permutation(members)[:n_train]
        train_mask[chosen] = True
    return cohort.subset(ids[train_mask]), cohort.subset(ids[~train_mask])


def stratified_folds(labels, k, seed):
    """Fold index (0..k-1) per row; each class is dealt round-robin after shuffling."""
    y = np.asarray(labels).astype(bool)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D]))
    fold = np.empty(y.size, dtype=np.int64)
    for cls in (False, True):
        members = rng.permutation(np.flatnonzero(y == cls))
        fold[members] = np.arange(members.size) % k
    return fold
