"""Lung-CT phantoms, intensity-based lung segmentation, cycle-consistent
slice synthesis, and a classifier benchmark harness."""

__version__ = "0.1.0"
