"""End-to-end optimization: Adam training loop, cross-validation, ensembling
and the ablation-experiment driver.

Training draws censoring-balanced batches, augments them on the fly, and
minimizes the combined objective. Variants without a task drop that term:
Seg-Backbone trains on the Dice loss only, the Sur-* variants on the Cox
loss only. Validation metrics run in eval mode (running BN statistics, no
dropout, no augmentation); the checkpoint with the best validation metric
is kept.
"""

from __future__ import annotations

import copy
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .augment import augment
from .losses import combined_loss, cox_ph_loss, dice_loss
from .metrics import NoComparablePairsError, c_index, dsc, threshold_mask, write_metrics_report
from .models import ArchSpec, SurvivalSegNet, build_model
from .preprocess import VolumePair, preprocess, preprocess_mask
from .sampler import balanced_batches
from .volio import read_manifest, read_mask, read_volume, resolve

PAPER_ITERATIONS = 15000
DEFAULT_SCHEDULE = ((0, 1e-4), (2500, 5e-5), (5000, 1e-5), (10000, 1e-6))
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainSpec:
    iterations: int = 1500
    batch_size: int = 8
    lr_schedule: tuple[tuple[int, float], ...] = DEFAULT_SCHEDULE
    seed: int = 0
    lambda_l2: float = 0.1
    eval_every: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.batch_size % 2 != 0 or self.batch_size <= 0:
            raise ValueError("batch_size must be a positive even number")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be nonnegative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        steps = [s for s, _ in self.lr_schedule]
        rates = [r for _, r in self.lr_schedule]
        if steps != sorted(set(steps)) or not steps or steps[0] != 0:
            raise ValueError("lr schedule must start at 0 with strictly increasing steps")
        if any(r <= 0 for r in rates) or any(a < b for a, b in zip(rates, rates[1:])):
            raise ValueError("lr schedule rates must be positive and non-increasing")

    def effective_schedule(self) -> list[tuple[int, float]]:
        """Schedule breakpoints rescaled from the reference 15000-iteration
        run to this spec's iteration budget."""
        scale = self.iterations / PAPER_ITERATIONS
        return [(int(round(step * scale)), rate) for step, rate in self.lr_schedule]

    def lr_at(self, iteration: int) -> float:
        rate = self.lr_schedule[0][1]
        for step, r in self.effective_schedule():
            if iteration >= step:
                rate = r
        return rate


@dataclass
class Subject:
    id: str
    pair: VolumePair
    mask: np.ndarray | None
    time: float
    event: int
    tnm: int
    fold: int


class Cohort:
    """All subjects of a manifest, preprocessed and held in memory."""

    def __init__(self, subjects: list[Subject]):
        if not subjects:
            raise ValueError("empty cohort")
        self.subjects = {s.id: s for s in subjects}
        self.ids = [s.id for s in subjects]

    @classmethod
    def load(cls, manifest_path: str | Path, extent: tuple[int, int, int]) -> "Cohort":
        records = read_manifest(manifest_path)
        subjects = []
        for r in records:
            pet, spacing = read_volume(resolve(manifest_path, r.pet))
            ct, _ = read_volume(resolve(manifest_path, r.ct))
            pair = preprocess(VolumePair(pet[0], ct[0], spacing), extent)
            mask = None
            if r.mask:
                raw_mask, mspacing = read_mask(resolve(manifest_path, r.mask))
                mask = preprocess_mask(raw_mask[0], mspacing, extent)
            subjects.append(Subject(r.id, pair, mask, r.time, r.event, r.tnm, r.fold))
        return cls(subjects)

    @property
    def folds(self) -> list[int]:
        return sorted({s.fold for s in self.subjects.values()})

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i in self.ids if self.subjects[i].fold == fold]

    def ids_excluding(self, fold: int) -> list[str]:
        return [i for i in self.ids if self.subjects[i].fold != fold]

    def events(self, ids: list[str]) -> list[int]:
        return [self.subjects[i].event for i in ids]

    def has_masks(self, ids: list[str]) -> bool:
        return all(self.subjects[i].mask is not None for i in ids)

    def batch(self, ids: list[str], aug_rng: np.random.Generator | None = None):
        """Stack a batch; augmentation is applied when a generator is given."""
        pets, cts, masks, clin, times, events = [], [], [], [], [], []
        any_mask = True
        for sid in ids:
            s = self.subjects[sid]
            pair, mask = s.pair, s.mask
            if aug_rng is not None:
                pair, mask, _ = augment(pair, mask, aug_rng)
            pets.append(pair.pet)
            cts.append(pair.ct)
            if mask is None:
                any_mask = False
            masks.append(mask)
            clin.append([float(s.tnm)])
            times.append(s.time)
            events.append(float(s.event))
        pet_ct = torch.from_numpy(np.stack([np.stack([p, c]) for p, c in zip(pets, cts)]))
        mask_t = (
            torch.from_numpy(np.stack(masks).astype(np.float32)) if any_mask else None
        )
        return (
            pet_ct,
            mask_t,
            torch.tensor(clin, dtype=torch.float32),
            torch.tensor(times, dtype=torch.float32),
            torch.tensor(events, dtype=torch.float32),
        )


@dataclass
class FoldResult:
    fold: int
    c_index: float | None
    dsc: float | None
    checkpoint_path: Path | None
    trajectory: list[dict] = field(default_factory=list)
    train_c_index: float | None = None
    train_dsc: float | None = None


def _clinical_or_none(spec: ArchSpec, clin: torch.Tensor) -> torch.Tensor | None:
    return clin[:, : spec.clinical_dim] if spec.clinical_dim else None


def evaluate(
    model: SurvivalSegNet,
    cohort: Cohort,
    ids: list[str],
    batch_size: int = 8,
) -> dict:
    """Eval-mode metrics over a subject set: cohort-level C-index and mean
    per-subject Dice of the 0.5-thresholded map."""
    spec = model.spec
    model.eval()
    risks, dscs = [], []
    times = np.array([cohort.subjects[i].time for i in ids])
    events = np.array([cohort.subjects[i].event for i in ids])
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start:start + batch_size]
            pet_ct, mask_t, clin, _, _ = cohort.batch(chunk)
            manual = mask_t if spec.variant == "Sur-CasNet" else None
            out = model(pet_ct, _clinical_or_none(spec, clin), manual_mask=manual)
            if out.risk is not None:
                risks.append(out.risk.numpy())
            if out.prob_map is not None and mask_t is not None:
                prob = out.prob_map[:, 1].numpy()
                for k in range(len(chunk)):
                    dscs.append(dsc(threshold_mask(prob[k]), mask_t[k].numpy() > 0.5))
    result: dict = {"n": len(ids)}
    if risks:
        risk = np.concatenate(risks)
        try:
            result["c_index"] = c_index(risk, times, events)
        except NoComparablePairsError:
            result["c_index"] = None
        result["risk"] = risk
    else:
        result["c_index"] = None
    result["dsc"] = float(np.mean(dscs)) if dscs else None
    return result


def train(
    model: SurvivalSegNet,
    cohort: Cohort,
    spec: TrainSpec,
    val_fold: int,
    run_dir: str | Path | None = None,
) -> FoldResult:
    """Optimize one model against all folds but ``val_fold``.

    Returns the fold result of the best-validation checkpoint; when
    ``run_dir`` is given, the checkpoint and trajectory.csv land in
    ``run_dir/fold<k>/``.
    """
    torch.set_num_threads(spec.threads)
    arch = model.spec
    train_ids = cohort.ids_excluding(val_fold)
    val_ids = cohort.fold_ids(val_fold)
    if not train_ids or not val_ids:
        raise ValueError(f"empty train or validation split for fold {val_fold}")
    if arch.trains_segmentation and not cohort.has_masks(train_ids):
        raise ValueError(
            f"variant {arch.variant} trains the segmentation loss but the "
            "manifest provides no tumor masks"
        )
    if arch.needs_manual_mask and not cohort.has_masks(cohort.ids):
        raise ValueError("Sur-CasNet needs manual tumor masks for every subject")

    torch.manual_seed(spec.seed)
    aug_rng = np.random.default_rng([spec.seed, 1])
    sampler = balanced_batches(train_ids, cohort.events(train_ids), spec.batch_size,
                               seed=spec.seed)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr_at(0), betas=ADAM_BETAS,
                           eps=ADAM_EPS)
    select_by = "c_index" if arch.has_head else "dsc"
    best_metric = -math.inf
    best_state = None
    trajectory: list[dict] = []

    for it in range(spec.iterations):
        lr = spec.lr_at(it)
        for group in opt.param_groups:
            group["lr"] = lr
        ids = next(sampler)
        pet_ct, mask_t, clin, times, events = cohort.batch(ids, aug_rng=aug_rng)
        model.train()
        manual = mask_t if arch.variant == "Sur-CasNet" else None
        out = model(pet_ct, _clinical_or_none(arch, clin), manual_mask=manual)

        zero = torch.zeros((), dtype=pet_ct.dtype)
        seg = dice_loss(out.prob_map[:, 1], mask_t) if arch.trains_segmentation else zero
        sur = cox_ph_loss(out.risk, times, events) if arch.has_head else zero
        l2 = model.l2_sum()
        total = combined_loss(seg, sur, l2, spec.lambda_l2)
        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at iteration {it} (batch {ids}): "
                f"seg={float(seg.detach())} sur={float(sur.detach())} "
                f"l2={float(l2.detach())}"
            )
        opt.zero_grad()
        total.backward()
        opt.step()

        if (it + 1) % spec.eval_every == 0 or it + 1 == spec.iterations:
            stats = evaluate(model, cohort, val_ids, spec.batch_size)
            row = {
                "iteration": it + 1,
                "lr": lr,
                "loss": float(total.detach()),
                "seg_loss": float(seg.detach()),
                "sur_loss": float(sur.detach()),
                "l2": float(l2.detach()),
                "val_c_index": stats["c_index"],
                "val_dsc": stats["dsc"],
            }
            trajectory.append(row)
            metric = stats[select_by]
            if metric is not None and metric > best_metric:
                best_metric = metric
                best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    val_stats = evaluate(model, cohort, val_ids, spec.batch_size)
    train_stats = evaluate(model, cohort, train_ids, spec.batch_size)

    result = FoldResult(
        fold=val_fold,
        c_index=val_stats["c_index"],
        dsc=val_stats["dsc"],
        checkpoint_path=None,
        trajectory=trajectory,
        train_c_index=train_stats["c_index"],
        train_dsc=train_stats["dsc"],
    )
    if run_dir is not None:
        fold_dir = Path(run_dir) / f"fold{val_fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = fold_dir / "checkpoint.mtsw"
        ckpt.save_module(result.checkpoint_path, model)
        write_trajectory(fold_dir / "trajectory.csv", trajectory)
        write_metrics_report(fold_dir, {
            "fold": val_fold,
            "val_c_index": _nan(result.c_index),
            "val_dsc": _nan(result.dsc),
            "train_c_index": _nan(result.train_c_index),
            "train_dsc": _nan(result.train_dsc),
        })
    return result


def _nan(v):
    return float("nan") if v is None else v


TRAJECTORY_FIELDS = ("iteration", "lr", "loss", "seg_loss", "sur_loss", "l2",
                     "val_c_index", "val_dsc")


def write_trajectory(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in TRAJECTORY_FIELDS})


def read_trajectory(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    mean_c_index: float | None
    mean_dsc: float | None
    pooled_c_index: float | None


def run_training(
    arch: ArchSpec,
    spec: TrainSpec,
    cohort: Cohort,
    val_fold: int,
    run_dir: str | Path | None = None,
) -> FoldResult:
    """Build a fresh seeded model and train it against one validation fold."""
    model = build_model(arch, seed=spec.seed)
    return train(model, cohort, spec, val_fold, run_dir)


def cross_validate(
    arch: ArchSpec,
    spec: TrainSpec,
    cohort: Cohort,
    run_dir: str | Path | None = None,
    workers: int = 1,
    manifest_path: str | Path | None = None,
) -> CrossValResult:
    """Train one model per fold; fold k trains with seed ``spec.seed + k``.

    With ``workers > 1`` folds run in parallel processes (requires
    ``manifest_path`` so workers can reload the cohort).
    """
    folds = cohort.folds
    if len(folds) < 2:
        raise ValueError(f"cross-validation needs >= 2 folds, got {folds}")
    for f in folds:
        if not cohort.fold_ids(f):
            raise ValueError(f"empty fold {f}")

    results: list[FoldResult] = []
    if workers > 1 and manifest_path is not None:
        jobs = [(arch, replace(spec, seed=spec.seed + f), str(manifest_path), f,
                 str(run_dir) if run_dir else None) for f in folds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        for f in folds:
            results.append(
                run_training(arch, replace(spec, seed=spec.seed + f), cohort, f, run_dir)
            )

    cvals = [r.c_index for r in results if r.c_index is not None]
    dvals = [r.dsc for r in results if r.dsc is not None]
    pooled = _pooled_c_index(arch, results, cohort, spec.batch_size, run_dir)
    summary = CrossValResult(
        folds=results,
        mean_c_index=float(np.mean(cvals)) if cvals else None,
        mean_dsc=float(np.mean(dvals)) if dvals else None,
        pooled_c_index=pooled,
    )
    if run_dir is not None:
        write_cv_summary(Path(run_dir) / "summary.csv", summary)
    return summary


def _fold_job(args):
    arch, spec, manifest_path, fold, run_dir = args
    torch.set_num_threads(spec.threads)
    cohort = Cohort.load(manifest_path, arch.input_extent)
    return run_training(arch, spec, cohort, fold, run_dir)


def _pooled_c_index(arch, results, cohort, batch_size, run_dir):
    """Pool per-fold validation risks (z-scored per fold) into one C-index."""
    if not arch.has_head:
        return None
    risks, times, events = [], [], []
    for r in results:
        if r.checkpoint_path is None:
            return None
        model = build_model(arch)
        ckpt.load_module(r.checkpoint_path, model)
        ids = cohort.fold_ids(r.fold)
        stats = evaluate(model, cohort, ids, batch_size)
        if stats["c_index"] is None or "risk" not in stats:
            return None
        z = _zscore(stats["risk"])
        risks.append(z)
        times.extend(cohort.subjects[i].time for i in ids)
        events.extend(cohort.subjects[i].event for i in ids)
    try:
        return c_index(np.concatenate(risks), np.array(times), np.array(events))
    except NoComparablePairsError:
        return None


def write_cv_summary(path: Path, summary: CrossValResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "c_index", "dsc"])
        for r in summary.folds:
            writer.writerow([r.fold, _cell(r.c_index), _cell(r.dsc)])
        writer.writerow(["mean", _cell(summary.mean_c_index), _cell(summary.mean_dsc)])
        writer.writerow(["pooled", _cell(summary.pooled_c_index), "/"])


def _cell(v) -> str:
    return "/" if v is None else f"{v:.4f}"


class DegenerateModelError(ValueError):
    """An ensemble member produced a constant risk vector."""


def _zscore(risk: np.ndarray) -> np.ndarray:
    sd = risk.std()
    if sd == 0:
        raise DegenerateModelError("zero-variance risk vector")
    return (risk - risk.mean()) / sd


def ensemble_predict(
    models: list[SurvivalSegNet],
    cohort: Cohort,
    ids: list[str] | None = None,
    batch_size: int = 8,
) -> np.ndarray:
    """Average of per-model z-score-normalized risk vectors over a cohort."""
    ids = ids if ids is not None else cohort.ids
    normalized = []
    for model in models:
        stats = evaluate(model, cohort, ids, batch_size)
        if "risk" not in stats:
            raise ValueError(f"variant {model.spec.variant} predicts no risk")
        normalized.append(_zscore(stats["risk"]))
    return np.mean(normalized, axis=0)


# ---------------------------------------------------------------------------
# ablation driver

TABLE2_ROWS = ("Seg-Backbone", "Sur-HS", "Sur-CasNet", "MT-HS", "MT-CasNet", "DeepMTS")
TABLE3_ROWS = (
    ("Sur-CasNet (only PET/CT)", "Sur-CasNet", "pet-ct-only"),
    ("Sur-CasNet (only Seg)", "Sur-CasNet", "mask-only"),
    ("Sur-CasNet (Multiplication)", "Sur-CasNet", "multiplication"),
    ("Sur-CasNet (Concatenation)", "Sur-CasNet", "concatenation"),
    ("MT-CasNet (Multiplication)", "MT-CasNet", "multiplication"),
    ("MT-CasNet (Concatenation)", "MT-CasNet", "concatenation"),
)
TABLE4_VARIANTS = ("Seg-Backbone", "Sur-HS", "MT-HS", "MT-CasNet", "DeepMTS")


@dataclass
class AblationResult:
    table2: list[dict]
    table3: list[dict]
    table4: list[dict]


def run_ablation_suite(
    base_arch: ArchSpec,
    spec: TrainSpec,
    cohort: Cohort,
    run_dir: str | Path,
    workers: int = 1,
    manifest_path: str | Path | None = None,
) -> AblationResult:
    """Cross-validate every ablation variant and emit the three tables."""
    run_dir = Path(run_dir)
    cache: dict[tuple, CrossValResult] = {}

    def cv(variant: str, backbone: str = "custom-residual",
           csn_input: str = "concatenation") -> CrossValResult:
        key = (variant, backbone, csn_input)
        if key not in cache:
            arch = replace(base_arch, variant=variant, backbone=backbone,
                           csn_input=csn_input)
            sub = run_dir / "runs" / f"{variant}_{backbone}_{csn_input}".replace("/", "-")
            cache[key] = cross_validate(arch, spec, cohort, sub, workers=workers,
                                        manifest_path=manifest_path)
        return cache[key]

    table2 = []
    for variant in TABLE2_ROWS:
        res = cv(variant)
        table2.append({"method": variant,
                       "c_index": res.mean_c_index, "dsc": res.mean_dsc})

    table3 = []
    for label, variant, strategy in TABLE3_ROWS:
        res = cv(variant, csn_input=strategy)
        row = {"method": label}
        for r in res.folds:
            row[f"fold{r.fold + 1}"] = r.c_index
        row["average"] = res.mean_c_index
        table3.append(row)

    table4 = []
    for variant in TABLE4_VARIANTS:
        for backbone in ("plain-unet", "custom-residual"):
            res = cv(variant, backbone=backbone)
            if variant == "Seg-Backbone":
                label = "U-net" if backbone == "plain-unet" else "Seg-Backbone (Ours)"
            elif backbone == "plain-unet":
                label = f"{variant} (U-net)"
            else:
                label = f"{variant} (Ours)"
            table4.append({"method": label,
                           "c_index": res.mean_c_index, "dsc": res.mean_dsc})

    tables_dir = run_dir / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    _write_table(tables_dir / "table2.csv", table2, ("method", "c_index", "dsc"))
    fold_cols = tuple(f"fold{f + 1}" for f in cohort.folds)
    _write_table(tables_dir / "table3.csv", table3, ("method",) + fold_cols + ("average",))
    _write_table(tables_dir / "table4.csv", table4, ("method", "c_index", "dsc"))
    return AblationResult(table2, table3, table4)


def _write_table(path: Path, rows: list[dict], fields: tuple[str, ...]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([row.get(f, "/") if isinstance(row.get(f), str)
                             else _cell(row.get(f)) for f in fields])
