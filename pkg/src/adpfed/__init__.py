"""Deterministic federated-learning simulator with adaptive differentially
private update sanitization (percentile clipping, Laplace noise, top-q
sparsification) and a toy multi-site segmentation task."""

__version__ = "0.1.0"
