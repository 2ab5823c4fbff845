"""Train-time augmentation: random shift, in-plane rotation, mirror flip.

One rigid transform is sampled per subject and applied identically to PET,
CT (trilinear) and the tumor mask (nearest-neighbor). Translation limits
scale with the volume extent so the same configuration works at any grid
size; rotation is restricted to the plane of the first two axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .preprocess import VolumePair
from .resample import affine_sample, affine_sample_many

REFERENCE_EXTENT = 128.0   # extent at which the translation limit is 10 voxels
MAX_TRANSLATE = 10.0
MAX_ROTATE_DEG = 5.0
FLIP_AXIS = 0              # mirror axis within the rotation plane
ROT_AXES = (0, 1)


@dataclass(frozen=True)
class RigidTransform:
    translation: tuple[float, float, float]
    angle_deg: float
    flip: bool

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.angle_deg == 0.0 and all(
            t == 0.0 for t in self.translation
        )


def sample_transform(rng: np.random.Generator, extent) -> RigidTransform:
    limits = [MAX_TRANSLATE * e / REFERENCE_EXTENT for e in extent]
    translation = tuple(float(rng.uniform(-l, l)) for l in limits)
    angle = float(rng.uniform(-MAX_ROTATE_DEG, MAX_ROTATE_DEG))
    flip = bool(rng.random() < 0.5)
    return RigidTransform(translation, angle, flip)


def _sampling_map(t: RigidTransform, extent) -> tuple[np.ndarray, np.ndarray]:
    """Affine map from output voxel index to input voxel index.

    The content transform is flip, then rotation about the volume center,
    then translation; sampling inverts it.
    """
    center = (np.asarray(extent, dtype=np.float64) - 1.0) / 2.0
    a, b = ROT_AXES
    theta = math.radians(-t.angle_deg)
    rot = np.eye(3)
    rot[a, a] = math.cos(theta)
    rot[a, b] = -math.sin(theta)
    rot[b, a] = math.sin(theta)
    rot[b, b] = math.cos(theta)
    flip = np.eye(3)
    flip_off = np.zeros(3)
    if t.flip:
        flip[FLIP_AXIS, FLIP_AXIS] = -1.0
        flip_off[FLIP_AXIS] = extent[FLIP_AXIS] - 1.0
    shift = np.asarray(t.translation, dtype=np.float64)
    # x -> flip(rot @ (x - shift - center) + center)
    matrix = flip @ rot
    offset = flip @ (rot @ (-shift - center) + center) + flip_off
    return matrix, offset


def apply_transform(
    t: RigidTransform,
    volume: np.ndarray,
    order: int = 1,
    fill: float = 0.0,
) -> np.ndarray:
    if t.is_identity:
        return volume.copy()
    matrix, offset = _sampling_map(t, volume.shape)
    return affine_sample(volume, matrix, offset, order=order, fill=fill)


def augment(
    pair: VolumePair,
    mask: np.ndarray | None,
    rng: np.random.Generator,
) -> tuple[VolumePair, np.ndarray | None, RigidTransform]:
    """Apply one random rigid transform to the pair and its mask."""
    t = sample_transform(rng, pair.extent)
    if t.is_identity:
        out_mask = None if mask is None else mask.copy()
        return VolumePair(pair.pet.copy(), pair.ct.copy(), pair.spacing), out_mask, t
    matrix, offset = _sampling_map(t, pair.extent)
    vols = [pair.pet, pair.ct]
    orders = [1, 1]
    fills = [0.0, 0.0]
    if mask is not None:
        vols.append(mask)
        orders.append(0)
        fills.append(0.0)
    sampled = affine_sample_many(vols, matrix, offset, orders, fills)
    out_mask = sampled[2].astype(np.uint8) if mask is not None else None
    return VolumePair(pet=sampled[0], ct=sampled[1], spacing=pair.spacing), out_mask, t
