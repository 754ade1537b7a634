import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from periop_aki.cohort import PatientRecord, TimeSeries  # noqa: E402
from periop_aki.outcomes import label_cohort  # noqa: E402
from periop_aki.synth import SynthConfig, generate_synthetic_cohort  # noqa: E402


def make_patient(pid="p1", age=60.0, sex="female", black=False, ckd=False, rrt=False,
                 history=(), postop=(), series=None, **kw):
    return PatientRecord(pid, age, sex, black, ckd, rrt, 0.0, 240.0,
                         creatinine_history=tuple(history), postop_creatinine=tuple(postop),
                         series=series or {}, **kw)


def ramp_series(name="map", n=120, start=0.0, step=1.0, value=70.0, valid=(20.0, 200.0)):
    t = start + step * np.arange(n)
    return TimeSeries(name, t, np.full(n, value), valid)


@pytest.fixture(scope="session")
def small_cohort():
    """Labeled 500-patient synthetic cohort shared by the slower tests."""
    return label_cohort(generate_synthetic_cohort(SynthConfig(n_patients=500, seed=3)))


# one line per acceptance criterion, repeated after the run so it survives output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
