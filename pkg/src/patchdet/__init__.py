"""Desk-scale self-supervised patch-detection pretraining for a set-prediction detector."""

__version__ = "0.1.0"
