"""Run-directory reporting: loss-trajectory figures, tables, text summary.

Figures are rendered headlessly to PNG files next to the delimited outputs
so a finished run can be inspected without any interactive tooling.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


class IncompleteRunError(RuntimeError):
    """The run directory lacks the artifacts a report needs."""


def _fold_dirs(run_dir: Path) -> list[Path]:
    return sorted(
        (d for d in run_dir.glob("fold*") if (d / "trajectory.csv").exists()),
        key=lambda d: d.name,
    )


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def _series(rows: list[dict], key: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for r in rows:
        v = r.get(key, "")
        if v not in ("", None, "/"):
            xs.append(int(r["iteration"]))
            ys.append(float(v))
    return xs, ys


def plot_trajectories(run_dir: Path, out_dir: Path) -> list[Path]:
    folds = _fold_dirs(run_dir)
    written = []

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for d in folds:
        rows = _read_rows(d / "trajectory.csv")
        xs, ys = _series(rows, "loss")
        axes[0].plot(xs, ys, label=d.name)
        xs, ys = _series(rows, "sur_loss")
        if ys:
            axes[1].plot(xs, ys, label=d.name)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("training loss")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("survival loss")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "loss_trajectories.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for d in folds:
        rows = _read_rows(d / "trajectory.csv")
        xs, ys = _series(rows, "val_c_index")
        if ys:
            axes[0].plot(xs, ys, label=d.name)
        xs, ys = _series(rows, "val_dsc")
        if ys:
            axes[1].plot(xs, ys, label=d.name)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("validation C-index")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("validation DSC")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "validation_metrics.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)\n"
    cols = list(rows[0].keys())
    widths = {c: max(len(c), *(len(str(r.get(c, "/"))) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines.append("  ".join("-" * widths[c] for c in cols))
    for r in rows:
        lines.append("  ".join(str(r.get(c, "/")).ljust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def write_report(run_dir: str | Path, out_dir: str | Path | None = None) -> Path:
    """Render figures and a text summary for a finished run directory."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    folds = _fold_dirs(run_dir)
    tables_dir = run_dir / "tables"
    nested_runs = sorted(run_dir.glob("runs/*")) if (run_dir / "runs").exists() else []
    if not folds and not tables_dir.exists() and not nested_runs:
        raise IncompleteRunError(
            f"incomplete run: {run_dir} has no fold trajectories or tables"
        )
    out_dir.mkdir(parents=True, exist_ok=True)

    sections: list[str] = [f"run directory: {run_dir}"]
    figure_paths: list[Path] = []
    if folds:
        figure_paths += plot_trajectories(run_dir, out_dir)
        sections.append(f"folds: {', '.join(d.name for d in folds)}")

    summary_path = run_dir / "summary.csv"
    if summary_path.exists():
        sections.append("cross-validation summary:\n" + format_table(_read_rows(summary_path)))

    if tables_dir.exists():
        for table in sorted(tables_dir.glob("*.csv")):
            sections.append(f"{table.stem}:\n" + format_table(_read_rows(table)))

    for sub in nested_runs:
        if _fold_dirs(sub):
            sub_out = out_dir / sub.name
            sub_out.mkdir(parents=True, exist_ok=True)
            figure_paths += plot_trajectories(sub, sub_out)

    if figure_paths:
        sections.append("figures:\n" + "\n".join(f"  {p}" for p in figure_paths))

    report_path = out_dir / "report.txt"
    report_path.write_text("\n\n".join(sections) + "\n")
    return report_path
