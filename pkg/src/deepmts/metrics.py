"""Evaluation metrics for censored survival data and binary segmentation."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class NoComparablePairsError(ValueError):
    """Harrell's C-index is undefined: no comparable pairs in the cohort."""


def c_index(risk, time, event) -> float:
    """Harrell's concordance index.

    A pair (i, j) is comparable iff T_i < T_j and subject i had an event.
    It counts 1 when the earlier-event subject has the higher risk, 0.5 on
    a risk tie, 0 otherwise. Events tied in time are not comparable.
    """
    risk = np.asarray(risk, dtype=np.float64).reshape(-1)
    time = np.asarray(time, dtype=np.float64).reshape(-1)
    event = np.asarray(event).reshape(-1).astype(bool)
    if not (risk.shape == time.shape == event.shape):
        raise ValueError("risk, time and event must have equal lengths")
    comparable = (time[:, None] < time[None, :]) & event[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise NoComparablePairsError("no comparable pairs")
    diff = risk[:, None] - risk[None, :]
    weight = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float((weight * comparable).sum() / n_pairs)


def threshold_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize a probability map; voxels at or above the threshold are
    foreground."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def dsc(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice similarity 2|A&B| / (|A|+|B|); two empty masks score 1.0."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(
            f"grid mismatch: pred {pred.shape} vs truth {truth.shape}"
        )
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & truth).sum()) / total


def write_metrics_report(out_dir: str | Path, metrics: dict, stem: str = "metrics") -> None:
    """Emit metrics as flat key=value text plus a JSON twin."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={_fmt(v)}" for k, v in metrics.items()]
    (out_dir / f"{stem}.txt").write_text("\n".join(lines) + "\n")
    (out_dir / f"{stem}.json").write_text(json.dumps(metrics, indent=2) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
