"""Learned 3D pseudo ground-truth annotation for parametric body, hand and
face models, with the per-sample fitting baseline it is compared against."""

__version__ = "0.1.0"
