"""Synthetic head phantoms with exact brain masks.

A phantom is a set of nested axis-aligned ellipsoids: brain (with an inner
white-matter core), a thin CSF layer, skull and scalp, on an empty
background. Two contrast modes reverse the brain/scalp intensity ordering
the way T1 contrast flips during the first months of life. A smooth
multiplicative bias field and Gaussian noise are added on top.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume, save_volume


class ContrastMode(str, Enum):
    NEWBORN = "newborn"
    OLDER_INFANT = "older-infant"


# tissue -> mean intensity before jitter
_INTENSITIES = {
    ContrastMode.NEWBORN: {"wm": 0.32, "gm": 0.45, "csf": 0.12, "skull": 0.06, "scalp": 0.90},
    ContrastMode.OLDER_INFANT: {"wm": 0.85, "gm": 0.62, "csf": 0.12, "skull": 0.06, "scalp": 0.40},
}


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    seed: int = 0
    contrast_mode: ContrastMode = ContrastMode.NEWBORN
    noise_sigma: float = 0.03
    bias_strength: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "contrast_mode", ContrastMode(self.contrast_mode))
        if int(self.size) < 16:
            raise ValueError(f"phantom size must be at least 16, got {self.size!r}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma!r}")
        if not 0 <= self.bias_strength < 1:
            raise ValueError(f"bias_strength must lie in [0, 1), got {self.bias_strength!r}")


def _ellipsoid_radius(grid, center, axes) -> np.ndarray:
    return np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes)))


def _bias_field(grid, size: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """1 + strength * g with g a random quadratic in normalized coordinates, |g| <= 1."""
    u = [(g - (size - 1) / 2) / (size / 2) for g in grid]
    coef = rng.normal(size=9)
    g = (coef[0] * u[0] + coef[1] * u[1] + coef[2] * u[2]
         + coef[3] * u[0] ** 2 + coef[4] * u[1] ** 2 + coef[5] * u[2] ** 2
         + coef[6] * u[0] * u[1] + coef[7] * u[1] * u[2] + coef[8] * u[0] * u[2])
    peak = np.abs(g).max()
    return 1.0 + strength * (g / peak if peak > 0 else g)


def make_phantom(spec: PhantomSpec) -> Tuple[Volume, LabelVolume]:
    """Render one phantom; the mask is exactly the brain ellipsoid.

    Geometry depends only on ``spec.seed``, so the same seed gives the same
    mask in both contrast modes.
    """
    size = int(spec.size)
    geo_rng, int_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))

    center = (size - 1) / 2 + geo_rng.uniform(-0.02, 0.02, 3) * size
    brain_axes = size * geo_rng.uniform(0.22, 0.30) * geo_rng.uniform(0.9, 1.1, 3)
    csf, skull, scalp = size * geo_rng.uniform([0.015, 0.03, 0.03], [0.025, 0.045, 0.05])
    wm_scale = geo_rng.uniform(0.5, 0.7)

    grid = np.meshgrid(*(np.arange(size, dtype=np.float64),) * 3, indexing="ij")
    rho_brain = _ellipsoid_radius(grid, center, brain_axes)
    rho_csf = _ellipsoid_radius(grid, center, brain_axes + csf)
    rho_skull = _ellipsoid_radius(grid, center, brain_axes + csf + skull)
    rho_scalp = _ellipsoid_radius(grid, center, brain_axes + csf + skull + scalp)

    tissue = {k: v + int_rng.uniform(-0.04, 0.04) for k, v in _INTENSITIES[spec.contrast_mode].items()}
    image = np.zeros((size,) * 3)
    image[rho_scalp <= 1] = tissue["scalp"]
    image[rho_skull <= 1] = tissue["skull"]
    image[rho_csf <= 1] = tissue["csf"]
    image[rho_brain <= 1] = tissue["gm"]
    image[rho_brain <= wm_scale] = tissue["wm"]
    image = ndimage.gaussian_filter(image, 0.6)  # partial-volume blur

    image *= _bias_field(grid, size, spec.bias_strength, int_rng)
    if spec.noise_sigma > 0:
        image += noise_rng.normal(0.0, spec.noise_sigma, image.shape)

    mask = rho_brain <= 1
    return Volume(image), LabelVolume(mask)


def make_cohort(n: int, base_spec: PhantomSpec = PhantomSpec(), seed: int = 0) -> List[Tuple[Volume, LabelVolume]]:
    """``n`` phantoms with distinct geometry seeds; contrast modes alternate
    in a seeded random order so both appear whenever ``n >= 2``."""
    if n <= 0:
        raise ValueError(f"cohort size must be positive, got {n!r}")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=n, replace=False)
    modes = [list(ContrastMode)[i % 2] for i in range(n)]
    rng.shuffle(modes)
    return [
        make_phantom(dataclasses.replace(base_spec, seed=int(s), contrast_mode=m))
        for s, m in zip(seeds, modes)
    ]


def subject_ids(n: int) -> List[str]:
    return [f"sub-{i:03d}" for i in range(n)]


def write_cohort(cohort, root) -> List[str]:
    """Write ``<root>/<subject>/{image,mask}.nii.gz``; returns the subject ids."""
    ids = subject_ids(len(cohort))
    for sid, (image, mask) in zip(ids, cohort):
        d = os.path.join(os.fspath(root), sid)
        os.makedirs(d, exist_ok=True)
        save_volume(image, os.path.join(d, "image.nii.gz"))
        save_volume(mask, os.path.join(d, "mask.nii.gz"))
    return ids
