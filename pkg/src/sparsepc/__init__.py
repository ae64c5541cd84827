"""Sparse adversarial point clouds against point-set classifiers."""

__version__ = "0.1.0"
