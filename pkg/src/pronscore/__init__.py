"""Utterance-level pronunciation scoring on top of self-supervised speech encoders."""

__version__ = "0.1.0"
