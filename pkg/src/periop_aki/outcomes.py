"""Baseline creatinine and KDIGO-style AKI labels at three horizons."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

from .cohort import Cohort, PatientRecord
from .errors import NoBaselineAvailable

MDRD_ASSUMED_GFR = 75.0
HISTORY_WINDOW_DAYS = 365.0
RATIO_THRESHOLD = 1.5
DELTA_THRESHOLD = 0.3
DELTA_WINDOW_H = 48.0
# 1.20 - 0.90 is 0.2999... in binary floating point
DELTA_EPS = 1e-9

# hours after surgery end; inf is "up to discharge"
HORIZONS = {"aki_3day": 72.0, "aki_7day": 168.0, "aki_overall": math.inf}

TRIGGERS = ("rrt", "ratio_1_5x", "delta_0_3_48h", "none")


@dataclass(frozen=True)
class BaselineCreatinine:
    value: float
    source: str  # "measured_prior_year" | "mdrd_estimate" | "latest_history"


@dataclass(frozen=True)
class OutcomeLabels:
    aki_3day: bool
    aki_7day: bool
    aki_overall: bool
    trigger_3day: str = "none"
    trigger_7day: str = "none"
    trigger_overall: str = "none"


def mdrd_baseline(age, female, black):
    """Creatinine (mg/dl) implied by the MDRD equation at GFR = 75."""
    x = (186.0 / MDRD_ASSUMED_GFR) * age ** -0.203
    if female:
        x *= 0.742
    if black:
        x *= 1.21
    return x ** (1.0 / 1.154)


def compute_baseline(patient: PatientRecord) -> BaselineCreatinine:
    recent = [v for d, v in patient.creatinine_history if 0 <= d <= HISTORY_WINDOW_DAYS]
    if recent:
        return BaselineCreatinine(min(recent), "measured_prior_year")
    if not patient.ckd_documented:
        return BaselineCreatinine(
            mdrd_baseline(patient.age, patient.female, patient.race_black), "mdrd_estimate")
    if patient.creatinine_history:
        # most recent = smallest days-before-admission
        d, v = min(patient.creatinine_history)
        return BaselineCreatinine(v, "latest_history")
    raise NoBaselineAvailable(
        f"{patient.patient_id}: CKD documented and no creatinine history")


def _first_trigger(times, values, baseline, horizon):
    """Earliest-listed criterion satisfied within ``horizon`` (rrt handled by caller)."""
    ratio_limit = RATIO_THRESHOLD * baseline
    for t, v in zip(times, values):
        if t > horizon:
            break
        if v > ratio_limit:
            return "ratio_1_5x"
    # any earlier value within 48h, not only the preceding one
    lo = 0
    for j in range(len(times)):
        if times[j] > horizon:
            break
        while times[j] - times[lo] > DELTA_WINDOW_H:
            lo += 1
        for i in range(lo, j):
            if times[i] < times[j] and values[j] - values[i] >= DELTA_THRESHOLD - DELTA_EPS:
                return "delta_0_3_48h"
    return "none"


def label_outcomes(patient: PatientRecord, baseline: BaselineCreatinine) -> OutcomeLabels:
    pts = sorted(patient.postop_creatinine)
    times = [t for t, _ in pts]
    values = [v for _, v in pts]
    out = {}
    for name, horizon in HORIZONS.items():
        if patient.rrt_postop:
            trig = "rrt"
        else:
            trig = _first_trigger(times, values, baseline.value, horizon)
        out[name] = trig != "none"
        out["trigger_" + name[4:]] = trig
    return OutcomeLabels(**out)


def label_cohort(cohort: Cohort) -> Cohort:
    """Attach labels for every patient."""
    labels = {p.patient_id: label_outcomes(p, compute_baseline(p)) for p in cohort.patients}
    return replace(cohort, labels=labels)


def write_labels(cohort: Cohort, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "aki_3day", "aki_7day", "aki_overall",
                    "trigger_3day", "trigger_7day", "trigger_overall"])
        for pid in cohort.ids:
            lab = cohort.labels[pid]
            w.writerow([pid, int(lab.aki_3day), int(lab.aki_7day), int(lab.aki_overall),
                        lab.trigger_3day, lab.trigger_7day, lab.trigger_overall])
