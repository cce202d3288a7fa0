"""Online augmentation: flips, quarter rotations, contrast and gamma distortion.

Geometric transforms hit the image and every mask plane identically.
Radiometric transforms assume a [0, 1] pixel view and never touch masks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import MaskStack
from .tiling import Patch

CONTRAST_RANGE = (0.75, 1.5)
GAMMA_RANGE = (0.75, 1.25)


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    rot_quarter: int = 0  # multiples of 90 degrees, counter-clockwise
    contrast_k: float = 1.0
    gamma: float = 1.0
    radiometric_enabled: bool = True


def sample_params(rng: np.random.Generator, profile: str = "luxcarta") -> AugmentParams:
    """Draw one augmentation: uniform flips/rotation; k ~ U[0.75, 1.5] and
    gamma ~ U[0.75, 1.25] for the luxcarta profile, radiometry off for the
    benchmark profile."""
    if profile not in ("luxcarta", "benchmark"):
        raise ValueError(f"unknown augmentation profile {profile!r}")
    hflip = bool(rng.integers(0, 2))
    vflip = bool(rng.integers(0, 2))
    rot = int(rng.integers(0, 4))
    if profile == "benchmark":
        return AugmentParams(hflip, vflip, rot, 1.0, 1.0, radiometric_enabled=False)
    k = float(rng.uniform(*CONTRAST_RANGE))
    gamma = float(rng.uniform(*GAMMA_RANGE))
    return AugmentParams(hflip, vflip, rot, k, gamma, radiometric_enabled=True)


def _transform_plane(arr: np.ndarray, p: AugmentParams) -> np.ndarray:
    if p.hflip:
        arr = arr[:, ::-1]
    if p.vflip:
        arr = arr[::-1, :]
    if p.rot_quarter:
        arr = np.rot90(arr, k=p.rot_quarter, axes=(0, 1))
    return np.ascontiguousarray(arr)


def apply_geometric(patch: Patch, p: AugmentParams) -> Patch:
    """Apply the identical flip/rotation to the image and all mask planes."""
    h, w = patch.image.shape[:2]
    if p.rot_quarter % 2 == 1 and h != w:
        raise ValueError(f"quarter rotation needs a square patch, got {h}x{w}")
    image = _transform_plane(patch.image, p)
    masks = patch.masks
    if masks is not None:
        masks = MaskStack(_transform_plane(masks.planes, p), masks.classes)
    return replace(patch, image=image, masks=masks)


def contrast_change(img: np.ndarray, k: float) -> np.ndarray:
    """Scale each channel's deviation from its own mean by k, clamped to [0, 1]."""
    if k <= 0:
        raise ValueError(f"contrast factor must be positive, got {k}")
    img = np.asarray(img, dtype=np.float64)
    mu = img.mean(axis=(0, 1), keepdims=True)
    return np.clip((img - mu) * k + mu, 0.0, 1.0)


def gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    """Elementwise power curve x**gamma on [0, 1] pixels."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.power(np.asarray(img, dtype=np.float64), gamma)


def apply_radiometric(img01: np.ndarray, p: AugmentParams) -> np.ndarray:
    if not p.radiometric_enabled:
        return np.asarray(img01, dtype=np.float64)
    return gamma_correct(contrast_change(img01, p.contrast_k), p.gamma)


def augment_patch(patch: Patch, p: AugmentParams, max_value: float = 255.0) -> Patch:
    """Full augmentation of a raw-intensity patch.

    Geometry first (image + masks), then radiometry on a temporary [0, 1]
    view, returned in the original value range (float). Normalization is the
    caller's next step.
    """
    out = apply_geometric(patch, p)
    img01 = np.asarray(out.image, dtype=np.float64) / max_value
    img01 = apply_radiometric(img01, p)
    return replace(out, image=img01 * max_value)
