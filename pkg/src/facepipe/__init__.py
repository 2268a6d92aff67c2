"""Synthetic head-shape dataset pipeline.

Stages: sample 3DMM shape coefficients, render perspective depth maps,
plan a balanced image manifest for an external diffusion backend, train
an embedding-to-shape mapping network, and evaluate predictions with a
scan-to-mesh protocol.
"""

__version__ = "0.1.0"
