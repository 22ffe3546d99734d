"""Inferior myocardial infarction detection from leads II, III and aVF with a
shallow multi-scale 1D CNN, written on top of numpy."""

__version__ = "0.1.0"
