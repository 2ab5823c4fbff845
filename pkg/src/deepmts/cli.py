"""Command-line entry points tying the library into reproducible runs.

Commands: synth, preprocess, train, crossval, ablate, predict, report.
Every command resolves its configuration from defaults, an optional
``--config`` key=value file, and per-key flag overrides, then writes the
effective configuration back into the output directory. Exit codes:
0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_config
from .metrics import threshold_mask, write_metrics_report
from .models import build_model
from .preprocess import VolumePair, preprocess, preprocess_mask
from .report import write_report
from .synth import generate_cohort
from .training import (
    Cohort,
    cross_validate,
    ensemble_predict,
    evaluate,
    run_ablation_suite,
    run_training,
)
from .volio import (
    SubjectRecord,
    read_manifest,
    read_mask,
    read_volume,
    resolve,
    write_manifest,
    write_mask,
    write_volume,
)
from . import checkpoint as ckpt

COMMANDS = ("synth", "preprocess", "train", "crossval", "ablate", "predict", "report")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="key=value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar="V",
                            help=argparse.SUPPRESS)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepmts",
        description="joint tumor segmentation and survival-risk modeling "
                    "on synthetic paired volumes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _add_config_flags(p)

    p = sub.add_parser("preprocess", help="normalize a cohort onto the target grid")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one model against one validation fold")
    _add_config_flags(p)

    p = sub.add_parser("crossval", help="5-fold cross-validation")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="run every ablation variant and emit tables")
    _add_config_flags(p)

    p = sub.add_parser("predict", help="predict risks and masks from checkpoints")
    _add_config_flags(p)

    p = sub.add_parser("report", help="render figures and a text report for a run")
    p.add_argument("run_dir", help="finished run directory")
    p.add_argument("--out", default=None, help="report destination")
    return parser


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    result = generate_cohort(out, cfg.cohort_params())
    write_config(cfg, out / "config")
    print(f"cohort: {cfg.n} subjects -> {result.manifest_path}")
    print(f"censoring fraction: {result.censoring_fraction:.3f}")
    print(f"oracle c-index of true log-hazard: {result.oracle_c_index:.4f}")
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    if not cfg.manifest:
        raise ConfigError("preprocess needs manifest=")
    records = read_manifest(cfg.manifest)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    new_records = []
    spacing = (cfg.spacing,) * 3
    for r in records:
        pet, sp = read_volume(resolve(cfg.manifest, r.pet))
        ct, _ = read_volume(resolve(cfg.manifest, r.ct))
        pair = preprocess(VolumePair(pet[0], ct[0], sp), cfg.extent, spacing)
        write_volume(out / r.pet, pair.pet, pair.spacing)
        write_volume(out / r.ct, pair.ct, pair.spacing)
        mask_rel = r.mask
        if r.mask:
            mask, msp = read_mask(resolve(cfg.manifest, r.mask))
            write_mask(out / r.mask,
                       preprocess_mask(mask[0], msp, cfg.extent, spacing), spacing)
        new_records.append(SubjectRecord(r.id, r.pet, r.ct, mask_rel, r.time,
                                         r.event, r.tnm, r.fold))
    write_manifest(out / "manifest.csv", new_records)
    write_config(cfg, out / "config")
    print(f"preprocessed {len(records)} subjects -> {out / 'manifest.csv'}")
    return 0


def _load_cohort(cfg: RunConfig) -> Cohort:
    if not cfg.manifest:
        raise ConfigError("this command needs manifest=")
    if not Path(cfg.manifest).exists():
        raise ConfigError(f"manifest {cfg.manifest} does not exist")
    return Cohort.load(cfg.manifest, cfg.extent)


def cmd_train(cfg: RunConfig) -> int:
    cohort = _load_cohort(cfg)
    out = Path(cfg.out)
    result = run_training(cfg.arch_spec(), cfg.train_spec(), cohort, cfg.val_fold, out)
    write_config(cfg, out / "config")
    print(f"fold {result.fold}: val c-index={_fmt(result.c_index)} "
          f"val dsc={_fmt(result.dsc)}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_crossval(cfg: RunConfig) -> int:
    cohort = _load_cohort(cfg)
    out = Path(cfg.out)
    summary = cross_validate(cfg.arch_spec(), cfg.train_spec(), cohort, out,
                             workers=cfg.workers, manifest_path=cfg.manifest)
    write_config(cfg, out / "config")
    for r in summary.folds:
        print(f"fold {r.fold}: c-index={_fmt(r.c_index)} dsc={_fmt(r.dsc)}")
    print(f"mean: c-index={_fmt(summary.mean_c_index)} dsc={_fmt(summary.mean_dsc)} "
          f"pooled c-index={_fmt(summary.pooled_c_index)}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    cohort = _load_cohort(cfg)
    out = Path(cfg.out)
    result = run_ablation_suite(cfg.arch_spec(), cfg.train_spec(), cohort, out,
                                workers=cfg.workers, manifest_path=cfg.manifest)
    write_config(cfg, out / "config")
    print(f"tables written under {out / 'tables'}")
    for row in result.table2:
        print(f"  {row['method']}: c-index={_fmt(row['c_index'])} "
              f"dsc={_fmt(row['dsc'])}")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    if not cfg.checkpoints:
        raise ConfigError("predict needs checkpoints= (comma-separated paths)")
    for path in cfg.checkpoints:
        if not Path(path).exists():
            raise ConfigError(f"checkpoint {path} does not exist")
    cohort = _load_cohort(cfg)
    arch = cfg.arch_spec()
    models = []
    for path in cfg.checkpoints:
        model = build_model(arch)
        ckpt.load_module(path, model)
        models.append(model)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(models) == 1:
        stats = evaluate(models[0], cohort, cohort.ids, cfg.batch_size)
        risks = stats["risk"]
    else:
        risks = ensemble_predict(models, cohort, cohort.ids, cfg.batch_size)

    with open(out / "risks.csv", "w") as fh:
        fh.write("id,risk\n")
        for sid, risk in zip(cohort.ids, risks):
            fh.write(f"{sid},{risk!r}\n")

    if arch.has_decoder:
        import torch

        mask_dir = out / "masks"
        for sid in cohort.ids:
            s = cohort.subjects[sid]
            pet_ct = torch.from_numpy(np.stack([s.pair.pet, s.pair.ct])[None])
            probs = []
            for model in models:
                model.eval()
                with torch.no_grad():
                    clin = torch.tensor([[float(s.tnm)]])[:, : arch.clinical_dim]
                    o = model(pet_ct, clin if arch.clinical_dim else None)
                probs.append(o.prob_map[0, 1].numpy())
            pred = threshold_mask(np.mean(probs, axis=0))
            write_mask(mask_dir / f"{sid}_pred.mmsk", pred, s.pair.spacing)
        print(f"masks written under {mask_dir}")
    write_config(cfg, out / "config")
    print(f"risks written to {out / 'risks.csv'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    path = write_report(args.run_dir, args.out)
    print(f"report written to {path}")
    return 0


def _fmt(v) -> str:
    return "/" if v is None else f"{v:.4f}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = _config_from_args(args)
        handler = {
            "synth": cmd_synth,
            "preprocess": cmd_preprocess,
            "train": cmd_train,
            "crossval": cmd_crossval,
            "ablate": cmd_ablate,
            "predict": cmd_predict,
        }[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
