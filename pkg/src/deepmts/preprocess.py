"""Volume preprocessing: resampling, SUV scaling, cropping, normalization.

Normalization is idempotent: CT is clipped to a window and min-max scaled
by the actual post-clip range, PET is divided by its 99.5th percentile and
clipped to [0, 1]. Applying the pipeline to an already-conforming pair
returns it unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .resample import crop_or_pad, resample_to_spacing


@dataclass
class VolumePair:
    """Paired PET-like and CT-like grids with shared voxel spacing (mm)."""

    pet: np.ndarray
    ct: np.ndarray
    spacing: np.ndarray

    def __post_init__(self):
        self.pet = np.asarray(self.pet, dtype=np.float32)
        self.ct = np.asarray(self.ct, dtype=np.float32)
        if self.spacing is None:
            raise ValueError("spacing metadata missing")
        self.spacing = np.asarray(self.spacing, dtype=np.float32)
        if self.pet.shape != self.ct.shape:
            raise ValueError(
                f"PET/CT extents differ: {self.pet.shape} vs {self.ct.shape}"
            )
        if self.spacing.shape != (3,) or np.any(self.spacing <= 0):
            raise ValueError(f"bad spacing {self.spacing}")

    @property
    def extent(self) -> tuple[int, int, int]:
        return self.pet.shape


@dataclass(frozen=True)
class SuvInfo:
    """Dose metadata for standardized-uptake-value conversion."""

    body_weight_g: float
    injected_dose_bq: float


CT_WINDOW = (-200.0, 300.0)
PET_PERCENTILE = 99.5


def suv_convert(activity: np.ndarray, info: SuvInfo) -> np.ndarray:
    """activity (Bq/ml) * body weight (g) / injected dose (Bq)."""
    if info.injected_dose_bq <= 0 or info.body_weight_g <= 0:
        raise ValueError("SUV conversion needs positive dose and body weight")
    return activity * (info.body_weight_g / info.injected_dose_bq)


def normalize_ct(ct: np.ndarray, window=CT_WINDOW) -> np.ndarray:
    lo, hi = window
    clipped = np.clip(ct, lo, hi)
    cmin, cmax = float(clipped.min()), float(clipped.max())
    if cmax <= cmin:
        return np.zeros_like(clipped)
    return (clipped - cmin) / (cmax - cmin)


def normalize_pet(pet: np.ndarray, percentile: float = PET_PERCENTILE) -> np.ndarray:
    scale = float(np.percentile(pet, percentile))
    if scale <= 0:
        return np.zeros_like(pet)
    return np.clip(pet / scale, 0.0, 1.0)


def preprocess(
    pair: VolumePair,
    target_extent: tuple[int, int, int],
    target_spacing: float | tuple[float, float, float] | None = None,
    ct_window=CT_WINDOW,
    suv: SuvInfo | None = None,
) -> VolumePair:
    """Resample to the target spacing, center crop/pad, normalize intensities."""
    pet, ct = pair.pet, pair.ct
    if suv is not None:
        pet = suv_convert(pet, suv)
    spacing = pair.spacing
    if target_spacing is not None:
        target = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (3,))
        if not np.allclose(target, spacing):
            pet = resample_to_spacing(pet, spacing, target)
            ct = resample_to_spacing(ct, spacing, target, fill=float(ct.min()))
        spacing = target.astype(np.float32)
    pet = crop_or_pad(pet, target_extent, fill=0.0)
    ct = crop_or_pad(ct, target_extent, fill=float(ct.min()))
    return VolumePair(
        pet=normalize_pet(pet).astype(np.float32),
        ct=normalize_ct(ct, ct_window).astype(np.float32),
        spacing=spacing,
    )


def preprocess_mask(
    mask: np.ndarray,
    spacing,
    target_extent: tuple[int, int, int],
    target_spacing=None,
) -> np.ndarray:
    """Label-preserving twin of ``preprocess`` (nearest-neighbor resample)."""
    out = np.asarray(mask)
    if target_spacing is not None:
        target = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (3,))
        if not np.allclose(target, np.asarray(spacing, dtype=np.float64)):
            out = resample_to_spacing(out.astype(np.float32), spacing, target, order=0)
    return crop_or_pad(out, target_extent, fill=0).astype(np.uint8)
