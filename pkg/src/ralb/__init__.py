"""Desk-scale laboratory for caption-guided adversarial fine-tuning of dual encoders."""

__version__ = "0.1.0"
