"""Dice similarity and the two reporting axes (across runs, across samples)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import DimensionError


def dice_coefficient(pred, target) -> float:
    """Binary Dice, 2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    total = int(pred.sum()) + int(target.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, target).sum()) / total


def mean_std(values, sample_std: bool = False) -> tuple[float, float]:
    """Arithmetic mean and standard deviation (population by default)."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("cannot summarize an empty list")
    mean = math.fsum(vals) / len(vals)
    ddof = 1 if sample_std and len(vals) > 1 else 0
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - ddof)
    return mean, math.sqrt(var)


def summarize_runs(final_means, sample_std: bool = False) -> tuple[float, float]:
    return mean_std(final_means, sample_std)


@dataclass
class DiceReport:
    per_sample: list[float]
    mean_across_samples: float
    std_across_samples: float

    @classmethod
    def from_scores(cls, scores, sample_std: bool = False) -> "DiceReport":
        scores = [float(s) for s in scores]
        mean, std = mean_std(scores, sample_std)
        return cls(scores, mean, std)
