"""Desk-scale FP8 training: emulated FP8 numerics, a numpy autograd engine,
transformer variants with frozen QK normalisation, outlier diagnostics and a
resumable trainer."""

__version__ = "0.1.0"
