"""
Labeling postoperative AKI from creatinine
==========================================

A few hand-made patients walk through the baseline rules and the three
KDIGO triggers at each horizon.
"""

from periop_aki.cohort import PatientRecord
from periop_aki.outcomes import compute_baseline, label_outcomes, mdrd_baseline


def patient(pid, history=(), postop=(), ckd=False, rrt=False, age=60.0, sex="female"):
    return PatientRecord(pid, age, sex, False, ckd, rrt, 0.0, 180.0,
                         creatinine_history=history, postop_creatinine=postop)


# With no creatinine in the prior year the baseline is back-calculated from
# the MDRD equation at an assumed GFR of 75.
print("MDRD baseline, 60 year old woman:", round(mdrd_baseline(60, True, False), 4))

cases = [
    # history is (days before admission, mg/dl); postop is (hours after surgery, mg/dl)
    patient("ratio", history=[(30, 0.9), (200, 1.1)], postop=[(20, 1.0), (60, 1.4)]),
    patient("delta", history=[(10, 1.0)], postop=[(10, 1.05), (50, 1.35)]),
    patient("late", history=[(10, 1.0)], postop=[(100, 1.2), (150, 1.6)]),
    patient("mdrd", postop=[(24, 1.3)]),
    patient("rrt", history=[(5, 1.0)], rrt=True),
]

for p in cases:
    b = compute_baseline(p)
    lab = label_outcomes(p, b)
    print(f"{p.patient_id:6s} baseline {b.value:.3f} ({b.source:19s}) "
          f"3d={lab.aki_3day!s:5s} 7d={lab.aki_7day!s:5s} overall={lab.aki_overall!s:5s} "
          f"trigger={lab.trigger_overall}")

# The ratio rule is strict (1.5x baseline does not count) while the 0.3 mg/dl
# rise is inclusive and uses any earlier value within 48 hours.
edge = patient("edge", history=[(10, 1.0)], postop=[(5, 1.5)])
print("exactly 1.5x baseline:", label_outcomes(edge, compute_baseline(edge)).aki_overall)
