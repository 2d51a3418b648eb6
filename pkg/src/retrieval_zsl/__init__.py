"""Cross-modal retrieval-loss training and calibrated nearest-prototype GZSL."""

__version__ = "0.1.0"
