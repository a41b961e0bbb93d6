"""Client-side update sanitization: top-q sparsification, percentile
clipping threshold, l2 projection and Laplace noise.

Three modes are supported:

* ``none``     -- the update is passed through untouched (non-private FL).
* ``static``   -- sparsify, clip to a fixed norm ``C``, add Laplace noise of
  scale ``sigma * C / epsilon``.
* ``adaptive`` -- sparsify, set the threshold to the ``p``-th percentile of
  the retained absolute components, clip to it, add Laplace noise of scale
  ``sigma * gamma / epsilon``.

The adaptive threshold is a per-component magnitude that is then used as an
l2-norm bound, so clipping is active on nearly every round. That is the
intended behaviour here and is visible through ``SanitizationTrace``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import params

MODES = ("none", "static", "adaptive")


class PrivacyConfigError(ValueError):
    pass


class DegenerateUpdateError(ValueError):
    """The retained update has no nonzero component, so no threshold exists."""


@dataclass(frozen=True)
class PrivacyConfig:
    mode: str = "adaptive"
    q: float = 0.9
    p: float = 95.0
    fixed_threshold: float | None = None
    epsilon: float = 0.001
    sigma: float = 1.0
    rng_seed: int = 0
    # alternatives kept for comparison against the defaults
    percentile_include_zeros: bool = False
    noise_on_support_only: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise PrivacyConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.q <= 1.0:
            raise PrivacyConfigError(f"q must lie in (0, 1], got {self.q}")
        if not 0.0 < self.p <= 100.0:
            raise PrivacyConfigError(f"p must lie in (0, 100], got {self.p}")
        if not self.epsilon > 0.0:
            raise PrivacyConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not self.sigma > 0.0:
            raise PrivacyConfigError(f"sigma must be positive, got {self.sigma}")
        # None in static mode means "calibrate from warm-up rounds"
        if self.fixed_threshold is not None and not self.fixed_threshold > 0.0:
            raise PrivacyConfigError(
                f"fixed_threshold must be positive, got {self.fixed_threshold}"
            )

    def noise_scale(self, threshold: float) -> float:
        return self.sigma * threshold / self.epsilon


@dataclass
class SanitizationTrace:
    pre_clip_norm: float
    gamma: float
    clip_factor: float
    post_clip_norm: float
    noise_scale_b: float
    retained_count: int
    degenerate: bool = False
    mode: str = field(default="none")


def retained_count(d: int, q: float) -> int:
    # the epsilon guards q*d landing a hair above an integer, e.g. 0.9*10
    return min(d, max(1, math.ceil(q * d - 1e-9)))


def sparsify_top_q(delta, q: float) -> np.ndarray:
    """Keep the ``ceil(q*d)`` largest-magnitude components, zero the rest.

    Ties in magnitude go to the lower index.
    """
    if not 0.0 < q <= 1.0:
        raise PrivacyConfigError(f"q must lie in (0, 1], got {q}")
    delta = np.asarray(delta, dtype=np.float64)
    d = delta.shape[0]
    if d == 0:
        return params.as_params(delta)
    k = retained_count(d, q)
    if k == d:
        return params.as_params(delta)
    # stable sort on -|x| keeps index order inside equal magnitudes
    order = np.argsort(-np.abs(delta), kind="stable")
    out = np.zeros_like(delta)
    keep = order[:k]
    out[keep] = delta[keep]
    return params.as_params(out)


def percentile_abs(delta, p: float, include_zeros: bool = False) -> float:
    """``p``-th percentile of |components| with linear interpolation between
    closest ranks, rank = (p/100)*(m-1) over the m sorted magnitudes.

    Only the nonzero (retained) components count unless ``include_zeros``.
    """
    if not 0.0 < p <= 100.0:
        raise PrivacyConfigError(f"p must lie in (0, 100], got {p}")
    mags = np.abs(np.asarray(delta, dtype=np.float64))
    if not include_zeros:
        mags = mags[mags != 0.0]
    if mags.size == 0 or not np.any(mags):
        raise DegenerateUpdateError("update has no nonzero component")
    mags = np.sort(mags)
    rank = (p / 100.0) * (mags.size - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, mags.size - 1)
    frac = rank - lo
    return float(mags[lo] + frac * (mags[hi] - mags[lo]))


def clip_l2(delta, gamma: float) -> tuple[np.ndarray, float]:
    if not gamma > 0.0:
        raise PrivacyConfigError(f"clipping threshold must be positive, got {gamma}")
    delta = np.asarray(delta, dtype=np.float64)
    norm = params.l2_norm(delta)
    factor = 1.0 / max(1.0, norm / gamma)
    return params.as_params(delta * factor), factor


def laplace_noise(
    delta, b: float, rng: np.random.Generator, support: np.ndarray | None = None
) -> np.ndarray:
    """Add i.i.d. Laplace(0, b) noise by inverse-CDF sampling.

    ``support`` optionally restricts the noise to a boolean mask of entries.
    """
    if not b >= 0.0:
        raise PrivacyConfigError(f"noise scale must be non-negative, got {b}")
    delta = np.asarray(delta, dtype=np.float64)
    noise = laplace_samples(b, delta.shape[0], rng)
    if support is not None:
        noise = np.where(support, noise, 0.0)
    if b == 0.0:
        return params.as_params(delta)
    return params.as_params(delta + noise)


def laplace_samples(b: float, n: int, rng: np.random.Generator) -> np.ndarray:
    # draws are consumed even when b == 0 so the stream position does not
    # depend on the threshold
    u = rng.random(n) - 0.5
    # u == -0.5 would give log(0); nudge to the open interval
    u = np.where(u <= -0.5, np.nextafter(-0.5, 0.0), u)
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def sanitize(
    delta, cfg: PrivacyConfig, rng: np.random.Generator
) -> tuple[np.ndarray, SanitizationTrace]:
    delta = params.as_params(delta)
    d = delta.shape[0]
    pre = params.l2_norm(delta)

    if cfg.mode == "none":
        trace = SanitizationTrace(
            pre_clip_norm=pre, gamma=0.0, clip_factor=1.0, post_clip_norm=pre,
            noise_scale_b=0.0, retained_count=d, mode="none",
        )
        return delta, trace

    sparse = sparsify_top_q(delta, cfg.q)
    k = retained_count(d, cfg.q)
    gamma = 0.0
    if np.any(sparse):
        if cfg.mode == "adaptive":
            gamma = percentile_abs(sparse, cfg.p, include_zeros=cfg.percentile_include_zeros)
        elif cfg.fixed_threshold is None:
            raise PrivacyConfigError("static mode needs a calibrated fixed_threshold")
        else:
            gamma = float(cfg.fixed_threshold)
    # gamma can only be 0 here when zeros are counted in the percentile
    if gamma == 0.0:
        trace = SanitizationTrace(
            pre_clip_norm=pre, gamma=0.0, clip_factor=1.0, post_clip_norm=0.0,
            noise_scale_b=0.0, retained_count=k, degenerate=True, mode=cfg.mode,
        )
        return params.zeros(d), trace

    clipped, factor = clip_l2(sparse, gamma)
    b = cfg.noise_scale(gamma)
    support = (sparse != 0.0) if cfg.noise_on_support_only else None
    noisy = laplace_noise(clipped, b, rng, support=support)
    trace = SanitizationTrace(
        pre_clip_norm=pre,
        gamma=gamma,
        clip_factor=factor,
        post_clip_norm=params.l2_norm(clipped),
        noise_scale_b=b,
        retained_count=k,
        mode=cfg.mode,
    )
    return noisy, trace
