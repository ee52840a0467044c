"""Video label propagation into pseudo ground truth, and trust-factor training on it."""

__version__ = "1.0.0"
