"""Desk-scale text-conditioned diffusion with selective cross-attention
key/value fine-tuning, closed-form concept merging, low-rank delta
compression, and a deterministic evaluation harness."""

__version__ = "0.1.0"
