"""Singing-voice separation with noisy self-training, on a synthetic desk-scale corpus."""

__version__ = "0.1.0"
