"""Leakage-free pipeline for training, evaluating and explaining a residual
CNN classifier of fetal central-nervous-system anomalies in ultrasound
images, plus a reader-study service comparing human and model recognition."""

__version__ = "0.1.0"
