"""Synthetic multi-site lesion segmentation data.

Each image holds one or two smooth radial blobs on a noisy background; the
ground-truth mask is where the noiseless blob field exceeds 0.3. Sites
differ by feature shift only: blob intensity offset, blob radius range and
background noise level, each perturbed in proportion to a heterogeneity
level ``h`` (``h = 0`` gives IID sites).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs

MASK_LEVEL = 0.3
BASE_PEAK = 0.6
# HAM10K site sizes divided by 20
DEFAULT_SIZES = (113, 105, 97, 82, 78)
DEFAULT_TEST_SIZE = 25
TRAIN_FRACTION = 0.75


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SiteShift:
    intensity_offset: float = 0.0
    radius_range: tuple[float, float] = (0.08, 0.16)  # fraction of image side
    noise_level: float = 0.08


@dataclass
class Sample:
    sample_id: int
    site: int
    image: np.ndarray
    mask: np.ndarray

    @property
    def foreground_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class ClientSite:
    site_id: int
    shift: SiteShift
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)

    @property
    def n_train(self) -> int:
        return len(self.train)


@dataclass
class Federation:
    sites: list[ClientSite]
    test: list[Sample]

    @property
    def n_total(self) -> int:
        return sum(s.n_train for s in self.sites)


def blob_field(size: int, centers, radii, peak: float) -> np.ndarray:
    """Sum of Gaussian bumps of height ``peak``; ``radii`` are in pixels."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for (cy, cx), r in zip(centers, radii):
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        out += peak * np.exp(-0.5 * d2 / (r * r))
    return out


def generate_sample(
    rng: np.random.Generator, shift: SiteShift, size: int = 32, sample_id: int = 0, site: int = 0
) -> Sample:
    peak = BASE_PEAK + shift.intensity_offset
    if peak <= MASK_LEVEL:
        raise DataConfigError(f"blob peak {peak} cannot exceed the mask level {MASK_LEVEL}")
    lo, hi = shift.radius_range
    # resample until the mask is nonempty and under 60% of the image
    while True:
        n_blobs = 1 + int(rng.random() < 0.3)
        centers = rng.uniform(0.15 * size, 0.85 * size, (n_blobs, 2))
        radii = rng.uniform(lo * size, hi * size, n_blobs)
        clean = blob_field(size, centers, radii, peak)
        mask = clean > MASK_LEVEL
        frac = mask.mean()
        if 0.0 < frac < 0.6:
            break
    noise = rng.normal(0.0, shift.noise_level, (size, size)) if shift.noise_level > 0 else 0.0
    image = np.clip(clean + noise, 0.0, 1.0)
    return Sample(sample_id, site, image, mask.astype(np.uint8))


def site_shift(rng: np.random.Generator, h: float) -> SiteShift:
    base = SiteShift()
    off = h * rng.uniform(-0.15, 0.15)
    rscale = 1.0 + h * rng.uniform(-0.35, 0.35)
    nscale = 1.0 + h * rng.uniform(-0.5, 1.0)
    return SiteShift(
        intensity_offset=off,
        radius_range=(base.radius_range[0] * rscale, base.radius_range[1] * rscale),
        noise_level=base.noise_level * nscale,
    )


def split_counts(n: int) -> tuple[int, int]:
    """75/25 train/validation split, train rounded up, at least one train sample."""
    n_train = max(1, math.ceil(TRAIN_FRACTION * n))
    return n_train, n - n_train


def build_federation(
    seed: int,
    sizes=DEFAULT_SIZES,
    heterogeneity: float = 0.5,
    test_size: int = DEFAULT_TEST_SIZE,
    image_size: int = 32,
) -> Federation:
    sizes = list(sizes)
    if len(sizes) < 1:
        raise DataConfigError("need at least one site")
    if any(int(s) != s or s < 1 for s in sizes):
        raise DataConfigError(f"site sizes must be positive integers, got {sizes}")
    if test_size < 1:
        raise DataConfigError(f"test size must be >= 1, got {test_size}")
    if not 0.0 <= heterogeneity <= 1.0:
        raise DataConfigError(f"heterogeneity must lie in [0, 1], got {heterogeneity}")
    if image_size < 4:
        raise DataConfigError(f"image size must be >= 4, got {image_size}")

    shift_rng = rngs.stream(seed, rngs.DATA, 0)
    shifts = [site_shift(shift_rng, heterogeneity) for _ in sizes]

    next_id = 0
    sites = []
    for k, (n, shift) in enumerate(zip(sizes, shifts)):
        gen = rngs.stream(seed, rngs.DATA, 1, k)
        samples = []
        for _ in range(int(n)):
            samples.append(generate_sample(gen, shift, image_size, next_id, k))
            next_id += 1
        order = rngs.stream(seed, rngs.SPLIT, k).permutation(len(samples))
        n_train, _ = split_counts(len(samples))
        sites.append(
            ClientSite(
                site_id=k,
                shift=shift,
                train=[samples[i] for i in order[:n_train]],
                val=[samples[i] for i in order[n_train:]],
            )
        )

    # held-out test set from the size-weighted mixture of site distributions
    test_rng = rngs.stream(seed, rngs.DATA, 2)
    weights = np.asarray(sizes, dtype=np.float64) / float(sum(sizes))
    test = []
    for _ in range(test_size):
        k = int(test_rng.choice(len(sizes), p=weights))
        test.append(generate_sample(test_rng, shifts[k], image_size, next_id, k))
        next_id += 1
    return Federation(sites, test)


def export_federation(fed: Federation, out_dir: str) -> str:
    """Write each grid as raw little-endian binary plus a ``manifest.csv``.

    Images are float64, masks uint8, both row-major.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = ["id,site,split,height,width,image_file,mask_file"]

    def emit(sample: Sample, split: str):
        h, w = sample.image.shape
        img_name = f"{sample.sample_id:06d}_image.f64"
        mask_name = f"{sample.sample_id:06d}_mask.u8"
        sample.image.astype("<f8").tofile(os.path.join(out_dir, img_name))
        sample.mask.astype("u1").tofile(os.path.join(out_dir, mask_name))
        rows.append(f"{sample.sample_id},{sample.site},{split},{h},{w},{img_name},{mask_name}")

    for site in fed.sites:
        for s in site.train:
            emit(s, "train")
        for s in site.val:
            emit(s, "val")
    for s in fed.test:
        emit(s, "test")
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, "w", newline="") as fh:
        fh.write("\r\n".join(rows) + "\r\n")
    return path


def load_exported(out_dir: str) -> list[dict]:
    """Read an exported federation back; used to check the binary format."""
    records = []
    with open(os.path.join(out_dir, "manifest.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            h, w = int(row["height"]), int(row["width"])
            image = np.fromfile(os.path.join(out_dir, row["image_file"]), dtype="<f8").reshape(h, w)
            mask = np.fromfile(os.path.join(out_dir, row["mask_file"]), dtype="u1").reshape(h, w)
            records.append({**row, "image": image, "mask": mask})
    return records
