"""Synthetic paired-volume phantom cohorts with planted survival ground truth.

Each subject gets an ellipsoidal tumor (bright in the PET-like channel,
denser in the CT-like channel) and, with configurable probability, a
smaller metastasis-like nodule placed outside the tumor. The nodule is
deliberately absent from the tumor mask labels: it carries prognostic
signal that segmentation-focused features cannot represent.

The planted log-relative-hazard is linear in log tumor volume, mean tumor
uptake and nodule presence. Event times are exponential with rate
``h0 * exp(log_hazard)``; censoring times are uniform on (0, c_max], with
c_max either given or calibrated so the expected censored fraction matches
a target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import c_index
from .volio import SubjectRecord, write_manifest, write_mask, write_volume

N_FOLDS = 5
MIN_COHORT = 10


@dataclass(frozen=True)
class HazardCoefficients:
    """Linear coefficients of the planted log-relative-hazard."""

    volume: float = 0.8   # applied to log(tumor voxel count)
    uptake: float = 0.5   # applied to mean PET intensity inside the tumor
    node: float = 1.0     # applied to the nodule-presence indicator

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.volume, self.uptake, self.node)


@dataclass(frozen=True)
class CohortParams:
    n: int = 200
    extent: tuple[int, int, int] = (32, 32, 16)
    spacing: float = 4.0
    seed: int = 0
    betas: HazardCoefficients = field(default_factory=HazardCoefficients)
    h0: float = 0.02
    c_max: float = 0.0              # 0 -> calibrate against censor_target
    censor_target: float = 0.65
    p_node: float = 0.5
    # phantom geometry, as fractions of the volume extent
    tumor_size_frac: tuple[float, float] = (0.065, 0.24)  # log-uniform scale
    tumor_shape_jitter: tuple[float, float] = (0.8, 1.25)  # per-axis factor
    min_radius: float = 1.4
    node_radius_frac: tuple[float, float] = (0.055, 0.10)
    node_margin: float = 2.0        # voxels between tumor and nodule surfaces
    # intensity model
    tumor_uptake: tuple[float, float] = (1.5, 10.0)
    node_uptake: tuple[float, float] = (2.5, 7.0)
    pet_background: float = 0.4
    pet_smooth_amp: float = 0.25
    pet_noise: float = 0.15
    # constant-intensity calibration slab in one corner: it owns the upper
    # intensity percentile, so the per-volume PET normalization keeps the
    # absolute uptake scale comparable across subjects
    marker_value: float = 12.0
    marker_frac: float = 0.17
    ct_base: float = 30.0
    ct_ramp_amp: float = 25.0
    ct_smooth_amp: float = 15.0
    ct_tumor_bump: float = 100.0
    ct_node_bump: float = 25.0
    ct_noise: float = 8.0
    tnm_flip_prob: float = 0.3


@dataclass(frozen=True)
class PhantomTruth:
    id: str
    tumor_volume: int
    mean_uptake: float
    node_present: int
    true_log_hazard: float


@dataclass(frozen=True)
class CohortResult:
    manifest_path: Path
    truth: list[PhantomTruth]
    censoring_fraction: float
    oracle_c_index: float
    c_max: float


def _box_blur(x: np.ndarray) -> np.ndarray:
    for ax in range(3):
        p = np.moveaxis(x, ax, 0)
        padded = np.concatenate([p[:1], p, p[-1:]], axis=0)
        p = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
        x = np.moveaxis(p, 0, ax)
    return x


def _smooth_noise(rng: np.random.Generator, extent, passes: int = 2) -> np.ndarray:
    x = rng.standard_normal(extent)
    for _ in range(passes):
        x = _box_blur(x)
    sd = x.std()
    return x / sd if sd > 0 else x


def _ellipsoid(extent, center, radii) -> np.ndarray:
    grids = np.indices(extent, dtype=np.float64)
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return q <= 1.0


def _marker_slab(extent, frac: float) -> tuple[slice, slice, slice]:
    return tuple(slice(0, max(2, math.ceil(frac * e))) for e in extent)


def _place_node(rng, extent, t_center, t_radii, n_radii, margin, marker):
    """Nodule center kept clear of the tumor, the borders and the marker."""
    exclusion = np.array([s.stop for s in marker], dtype=np.float64)
    for _ in range(200):
        center = np.array([rng.uniform(r + 1.0, e - r - 1.0) for e, r in zip(extent, n_radii)])
        gap = np.linalg.norm(center - t_center) - max(t_radii) - max(n_radii)
        clear_of_marker = np.any(center - n_radii > exclusion + 1.0)
        if gap >= margin and clear_of_marker:
            return center
    raise ValueError("extent too small to place a nodule outside the tumor")


def _subject_phantom(rng: np.random.Generator, params: CohortParams):
    extent = params.extent
    lo, hi = params.tumor_size_frac
    size = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    jlo, jhi = params.tumor_shape_jitter
    radii = np.array([
        max(params.min_radius, size * e * rng.uniform(jlo, jhi)) for e in extent
    ])
    marker = _marker_slab(extent, params.marker_frac)
    slab_end = np.array([s.stop for s in marker], dtype=np.float64)
    center = None
    for _ in range(200):
        cand = np.array([rng.uniform(e / 3.0, 2.0 * e / 3.0) for e in extent])
        if np.any(cand - radii > slab_end + 1.0):
            center = cand
            break
    if center is None:
        raise ValueError("extent too small to place a tumor plus margin")
    mask = _ellipsoid(extent, center, radii)
    if not mask.any():
        raise ValueError("extent too small to place a tumor plus margin")
    soft = _box_blur(mask.astype(np.float64))
    node_present = rng.random() < params.p_node
    node_soft = np.zeros(extent)
    if node_present:
        nlo, nhi = params.node_radius_frac
        n_radii = np.array([rng.uniform(nlo, nhi) * e for e in extent])
        n_center = _place_node(rng, extent, center, radii, n_radii,
                               params.node_margin, marker)
        node_soft = _box_blur(_ellipsoid(extent, n_center, n_radii).astype(np.float64))

    uptake = rng.uniform(*params.tumor_uptake)
    node_uptake = rng.uniform(*params.node_uptake)
    pet = (
        params.pet_background
        + params.pet_smooth_amp * _smooth_noise(rng, extent)
        + params.pet_noise * rng.standard_normal(extent)
        + uptake * soft
        + node_uptake * node_soft
    )
    pet[marker] = params.marker_value
    pet = np.maximum(pet, 0.0)

    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    grids = np.indices(extent, dtype=np.float64)
    ramp = sum(d * (g / e - 0.5) for d, g, e in zip(direction, grids, extent))
    ct = (
        params.ct_base
        + params.ct_ramp_amp * ramp
        + params.ct_smooth_amp * _smooth_noise(rng, extent)
        + params.ct_tumor_bump * soft
        + params.ct_node_bump * node_soft
        + params.ct_noise * rng.standard_normal(extent)
    )

    volume = int(mask.sum())
    mean_uptake = float(pet[mask].mean())
    return (
        pet.astype(np.float32),
        ct.astype(np.float32),
        mask.astype(np.uint8),
        volume,
        mean_uptake,
        int(node_present),
    )


def _calibrate_c_max(event_times: np.ndarray, target: float) -> float:
    """Solve E[min(t, c)/c] = target for c by bisection.

    With censoring ~ U(0, c], a subject with event time t is censored with
    probability min(t, c)/c, which decreases monotonically in c.
    """
    lo = float(event_times.min()) * 1e-3
    hi = float(event_times.max()) * 1e3

    def frac(c):
        return float(np.minimum(event_times, c).mean() / c)

    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if frac(mid) > target:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def validate_params(params: CohortParams) -> None:
    if params.n < MIN_COHORT:
        raise ValueError(f"cohort size {params.n} below minimum {MIN_COHORT}")
    if any(e % 16 != 0 or e <= 0 for e in params.extent):
        raise ValueError(f"extent {params.extent} must be positive and divisible by 16")
    if all(b == 0.0 for b in params.betas.as_tuple()):
        raise ValueError(
            "degenerate hazard: all coefficients are zero, every subject would "
            "share one risk and the planted ordering would be undefined"
        )
    if not 0.0 <= params.p_node <= 1.0:
        raise ValueError("p_node must be in [0, 1]")
    if params.c_max < 0:
        raise ValueError("c_max must be nonnegative (0 selects calibration)")
    if not 0.0 < params.censor_target < 1.0:
        raise ValueError("censor_target must be in (0, 1)")


def generate_cohort(out_dir: str | Path, params: CohortParams) -> CohortResult:
    """Generate volumes, masks, manifest and a ground-truth table.

    Deterministic: the same params (seed included) reproduce byte-identical
    files. Subjects draw from independent child streams of the seed, so the
    phantom of subject i does not depend on cohort size.
    """
    validate_params(params)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(params.seed).spawn(params.n + 1)
    cohort_rng = np.random.default_rng(seeds[-1])

    truth: list[PhantomTruth] = []
    log_hazards = np.zeros(params.n)
    event_times = np.zeros(params.n)
    rows: list[dict] = []
    spacing = (params.spacing,) * 3
    for i in range(params.n):
        rng = np.random.default_rng(seeds[i])
        pet, ct, mask, volume, mean_uptake, node = _subject_phantom(rng, params)
        b = params.betas
        lh = b.volume * math.log(volume) + b.uptake * mean_uptake + b.node * node
        log_hazards[i] = lh
        event_times[i] = rng.exponential(1.0 / (params.h0 * math.exp(lh)))

        sid = f"sub{i:04d}"
        write_volume(out_dir / f"{sid}_pet.mvol", pet, spacing)
        write_volume(out_dir / f"{sid}_ct.mvol", ct, spacing)
        write_mask(out_dir / f"{sid}_mask.mmsk", mask, spacing)
        truth.append(PhantomTruth(sid, volume, mean_uptake, node, lh))
        rows.append({"id": sid, "pet": f"{sid}_pet.mvol", "ct": f"{sid}_ct.mvol",
                     "mask": f"{sid}_mask.mmsk"})

    c_max = params.c_max if params.c_max > 0 else _calibrate_c_max(
        event_times, params.censor_target)
    censor_times = cohort_rng.uniform(0.0, c_max, size=params.n)
    censor_times = np.maximum(censor_times, c_max * 1e-9)
    observed = np.minimum(event_times, censor_times)
    events = (event_times <= censor_times).astype(int)

    median_lh = float(np.median(log_hazards))
    tnm = (log_hazards > median_lh).astype(int)
    flips = cohort_rng.random(params.n) < params.tnm_flip_prob
    tnm = np.where(flips, 1 - tnm, tnm)

    fold_of = cohort_rng.permutation(params.n) % N_FOLDS

    records = [
        SubjectRecord(
            id=r["id"], pet=r["pet"], ct=r["ct"], mask=r["mask"],
            time=float(observed[i]), event=int(events[i]),
            tnm=int(tnm[i]), fold=int(fold_of[i]),
        )
        for i, r in enumerate(rows)
    ]
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest_path, records)
    _write_truth(out_dir / "truth.csv", truth)

    return CohortResult(
        manifest_path=manifest_path,
        truth=truth,
        censoring_fraction=float(1.0 - events.mean()),
        oracle_c_index=c_index(log_hazards, observed, events),
        c_max=float(c_max),
    )


def _write_truth(path: Path, truth: list[PhantomTruth]) -> None:
    lines = ["id,tumor_volume,mean_uptake,node_present,true_log_hazard"]
    for t in truth:
        lines.append(
            f"{t.id},{t.tumor_volume},{t.mean_uptake!r},{t.node_present},{t.true_log_hazard!r}"
        )
    path.write_text("\n".join(lines) + "\n")


def read_truth(path: str | Path) -> list[PhantomTruth]:
    lines = Path(path).read_text().strip().splitlines()
    out = []
    for line in lines[1:]:
        sid, vol, up, node, lh = line.split(",")
        out.append(PhantomTruth(sid, int(vol), float(up), int(node), float(lh)))
    return out


def with_seed(params: CohortParams, seed: int) -> CohortParams:
    return replace(params, seed=seed)
