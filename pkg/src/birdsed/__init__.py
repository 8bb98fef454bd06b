"""Synthetic-soundscape training and evaluation of CRNN bird-call detectors."""

__version__ = "0.1.0"
