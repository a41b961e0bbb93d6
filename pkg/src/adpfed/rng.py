"""Deterministic random streams keyed by (seed, purpose, round, client, ...)."""

from __future__ import annotations

import numpy as np

# purpose tags keep e.g. the noise stream of client k independent of its
# shuffle stream, so mode changes never perturb the training order
INIT = 1
SHUFFLE = 2
NOISE = 3
DATA = 4
SPLIT = 5


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(purpose), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
