"""Volume, mask and cohort-manifest file I/O.

Volume files (magic ``MVOL1``): extents as 3 little-endian u32 (D, H, W),
spacing as 3 little-endian f32 (mm), channel count u32, then f32 voxels in
D-major order per channel. Mask files (``MMSK1``) share the header with u8
voxels. Manifests are CSV with the fixed header
``id,pet,ct,mask,time,event,tnm,fold``; paths are stored relative to the
manifest location.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOL_MAGIC = b"MVOL1"
MASK_MAGIC = b"MMSK1"
MANIFEST_FIELDS = ("id", "pet", "ct", "mask", "time", "event", "tnm", "fold")


class VolumeFormatError(ValueError):
    """Bad magic, header or payload size in a volume/mask file."""


def _write(path: Path, magic: bytes, voxels: np.ndarray, spacing) -> None:
    if voxels.ndim == 3:
        voxels = voxels[None]
    if voxels.ndim != 4:
        raise VolumeFormatError(f"expected (C, D, H, W) or (D, H, W), got {voxels.shape}")
    spacing = np.asarray(spacing, dtype="<f4")
    if spacing.shape != (3,):
        raise VolumeFormatError(f"spacing must have 3 entries, got {spacing.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<3I", *voxels.shape[1:]))
        fh.write(spacing.tobytes())
        fh.write(struct.pack("<I", voxels.shape[0]))
        fh.write(np.ascontiguousarray(voxels).tobytes())


def _read(path: Path, magic: bytes, dtype) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:5] != magic:
        raise VolumeFormatError(f"bad magic in {path}: {raw[:5]!r}")
    d, h, w = struct.unpack_from("<3I", raw, 5)
    spacing = np.frombuffer(raw, dtype="<f4", count=3, offset=17).copy()
    (channels,) = struct.unpack_from("<I", raw, 29)
    voxels = np.frombuffer(raw, dtype=dtype, offset=33)
    expected = channels * d * h * w
    if voxels.size != expected:
        raise VolumeFormatError(
            f"{path}: payload has {voxels.size} voxels, header promises {expected}"
        )
    return voxels.reshape(channels, d, h, w).copy(), spacing


def write_volume(path: str | Path, voxels: np.ndarray, spacing) -> None:
    _write(Path(path), VOL_MAGIC, np.asarray(voxels, dtype="<f4"), spacing)


def read_volume(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (voxels as (C, D, H, W) float32, spacing as (3,) float32)."""
    return _read(Path(path), VOL_MAGIC, "<f4")


def write_mask(path: str | Path, voxels: np.ndarray, spacing) -> None:
    _write(Path(path), MASK_MAGIC, np.asarray(voxels, dtype="u1"), spacing)


def read_mask(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    return _read(Path(path), MASK_MAGIC, "u1")


@dataclass(frozen=True)
class SubjectRecord:
    """One manifest row; paths resolved against the manifest directory."""

    id: str
    pet: str
    ct: str
    mask: str  # empty string when the cohort carries no tumor masks
    time: float
    event: int
    tnm: int
    fold: int


def write_manifest(path: str | Path, records: list[SubjectRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest subject ids must be unique")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.id, r.pet, r.ct, r.mask, f"{r.time!r}", r.event, r.tnm, r.fold])


def read_manifest(path: str | Path) -> list[SubjectRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(
                f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}"
            )
        records = [
            SubjectRecord(
                id=row["id"],
                pet=row["pet"],
                ct=row["ct"],
                mask=row["mask"],
                time=float(row["time"]),
                event=int(row["event"]),
                tnm=int(row["tnm"]),
                fold=int(row["fold"]),
            )
            for row in reader
        ]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate subject ids")
    return records


def resolve(manifest_path: str | Path, rel: str) -> Path:
    return Path(manifest_path).parent / rel
