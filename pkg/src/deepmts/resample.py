"""Affine volume resampling with trilinear or nearest-neighbor interpolation.

One primitive serves both the preprocessing resampler and the train-time
augmentation: output voxel ``i`` reads the input at ``matrix @ i + offset``.
Samples that fall outside the input grid (any coordinate beyond the voxel-
center bounding box) take the fill value.
"""

from __future__ import annotations

import functools

import numpy as np


@functools.lru_cache(maxsize=8)
def _index_grid(shape: tuple[int, int, int]) -> np.ndarray:
    return np.indices(shape, dtype=np.float64).reshape(3, -1)


def _sample_at(vol: np.ndarray, coords: np.ndarray, order: int, fill: float) -> np.ndarray:
    bounds = np.array(vol.shape, dtype=np.float64) - 1.0
    inside = np.all((coords >= 0.0) & (coords <= bounds[:, None]), axis=0)
    if order == 0:
        idx = np.rint(np.clip(coords, 0.0, bounds[:, None])).astype(np.int64)
        values = vol[idx[0], idx[1], idx[2]].astype(np.float64)
    else:
        lo = np.floor(np.clip(coords, 0.0, bounds[:, None])).astype(np.int64)
        lo = np.minimum(lo, (np.array(vol.shape) - 1)[:, None])
        hi = np.minimum(lo + 1, (np.array(vol.shape) - 1)[:, None])
        frac = np.clip(coords - lo, 0.0, 1.0)
        values = np.zeros(coords.shape[1], dtype=np.float64)
        for dz in (0, 1):
            wz = frac[0] if dz else 1.0 - frac[0]
            iz = hi[0] if dz else lo[0]
            for dy in (0, 1):
                wy = frac[1] if dy else 1.0 - frac[1]
                iy = hi[1] if dy else lo[1]
                for dx in (0, 1):
                    wx = frac[2] if dx else 1.0 - frac[2]
                    ix = hi[2] if dx else lo[2]
                    values += wz * wy * wx * vol[iz, iy, ix].astype(np.float64)
    return np.where(inside, values, float(fill))


def affine_sample(
    vol: np.ndarray,
    matrix: np.ndarray,
    offset: np.ndarray,
    out_shape: tuple[int, int, int] | None = None,
    order: int = 1,
    fill: float = 0.0,
) -> np.ndarray:
    """Sample ``vol`` at affinely mapped output-voxel positions.

    order=1 is trilinear, order=0 nearest-neighbor (used for label masks).
    """
    if vol.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {vol.shape}")
    if order not in (0, 1):
        raise ValueError("order must be 0 (nearest) or 1 (trilinear)")
    out_shape = tuple(out_shape) if out_shape is not None else vol.shape
    matrix = np.asarray(matrix, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    coords = matrix @ _index_grid(out_shape) + offset[:, None]
    values = _sample_at(vol, coords, order, fill)
    return values.reshape(out_shape).astype(vol.dtype, copy=False)


def affine_sample_many(
    vols: list[np.ndarray],
    matrix: np.ndarray,
    offset: np.ndarray,
    orders: list[int],
    fills: list[float],
) -> list[np.ndarray]:
    """Sample several same-shape volumes under one transform, computing the
    mapped coordinates once."""
    shape = vols[0].shape
    if any(v.shape != shape for v in vols):
        raise ValueError("all volumes must share one grid")
    matrix = np.asarray(matrix, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    coords = matrix @ _index_grid(tuple(shape)) + offset[:, None]
    return [
        _sample_at(v, coords, o, f).reshape(shape).astype(v.dtype, copy=False)
        for v, o, f in zip(vols, orders, fills)
    ]


def resample_to_spacing(
    vol: np.ndarray,
    spacing,
    new_spacing,
    order: int = 1,
    fill: float = 0.0,
) -> np.ndarray:
    """Resample onto a grid with the requested voxel size, edges aligned.

    Identical spacings return an exact copy of the input.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    new_spacing = np.asarray(new_spacing, dtype=np.float64)
    if np.any(spacing <= 0) or np.any(new_spacing <= 0):
        raise ValueError("voxel spacings must be positive")
    ratio = new_spacing / spacing
    out_shape = tuple(max(1, int(np.floor(e / r))) for e, r in zip(vol.shape, ratio))
    matrix = np.diag(ratio)
    offset = 0.5 * ratio - 0.5
    return affine_sample(vol, matrix, offset, out_shape, order=order, fill=fill)


def crop_or_pad(vol: np.ndarray, extent: tuple[int, int, int], fill: float = 0.0) -> np.ndarray:
    """Center-crop or center-pad to the target extent, axis by axis."""
    out = np.full(extent, fill, dtype=vol.dtype)
    src = []
    dst = []
    for e_in, e_out in zip(vol.shape, extent):
        if e_in >= e_out:
            start = (e_in - e_out) // 2
            src.append(slice(start, start + e_out))
            dst.append(slice(0, e_out))
        else:
            start = (e_out - e_in) // 2
            src.append(slice(0, e_in))
            dst.append(slice(start, start + e_in))
    out[tuple(dst)] = vol[tuple(src)]
    return out
