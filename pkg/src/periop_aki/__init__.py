"""Perioperative AKI risk modeling: preoperative additive-logistic scores stacked
into an intraoperative random forest."""

__version__ = "0.1.0"
