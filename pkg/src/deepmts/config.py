"""Flat key=value run configuration with CLI-flag overrides.

Every field is validated before any compute starts; unknown keys are
rejected with the offending line. The effective configuration is written
back into the run directory and re-parses to an equal RunConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .models import ArchSpec, BACKBONES, CSN_INPUTS, VARIANTS
from .synth import CohortParams, HazardCoefficients
from .training import TrainSpec


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""


@dataclass(frozen=True)
class RunConfig:
    # cohort
    n: int = 200
    extent: tuple[int, int, int] = (32, 32, 16)
    spacing: float = 4.0
    cohort_seed: int = 0
    beta: tuple[float, float, float] = (0.8, 0.5, 1.0)
    h0: float = 0.02
    c_max: float = 0.0
    censor_target: float = 0.65
    p_node: float = 0.5
    # architecture
    variant: str = "DeepMTS"
    backbone: str = "custom-residual"
    csn_input: str = "concatenation"
    width: float = 0.25
    clinical_dim: int = 1
    # training
    iterations: int = 1500
    batch_size: int = 8
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1e-4), (2500, 5e-5),
                                                  (5000, 1e-5), (10000, 1e-6))
    lambda_l2: float = 0.1
    eval_every: int = 50
    val_fold: int = 0
    seed: int = 0
    workers: int = 1
    # paths
    manifest: str = ""
    out: str = "run"
    checkpoints: tuple[str, ...] = ()

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(
            variant=self.variant,
            backbone=self.backbone,
            csn_input=self.csn_input,
            width=self.width,
            input_extent=self.extent,
            clinical_dim=self.clinical_dim,
        )

    def train_spec(self) -> TrainSpec:
        return TrainSpec(
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr_schedule=self.lr_schedule,
            seed=self.seed,
            lambda_l2=self.lambda_l2,
            eval_every=self.eval_every,
        )

    def cohort_params(self) -> CohortParams:
        b = HazardCoefficients(*self.beta)
        return CohortParams(
            n=self.n,
            extent=self.extent,
            spacing=self.spacing,
            seed=self.cohort_seed,
            betas=b,
            h0=self.h0,
            c_max=self.c_max,
            censor_target=self.censor_target,
            p_node=self.p_node,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in ("n", "cohort_seed", "clinical_dim", "iterations", "batch_size",
                   "eval_every", "val_fold", "seed", "workers"):
            return int(raw)
        if key in ("spacing", "h0", "c_max", "censor_target", "p_node", "width",
                   "lambda_l2"):
            return float(raw)
        if key == "extent":
            parts = tuple(int(p) for p in raw.replace("x", ",").split(","))
            if len(parts) != 3:
                raise ValueError("need three extents")
            return parts
        if key == "beta":
            parts = tuple(float(p) for p in raw.split(","))
            if len(parts) != 3:
                raise ValueError("need three coefficients")
            return parts
        if key == "lr_schedule":
            pairs = []
            for item in raw.split(","):
                step, rate = item.split(":")
                pairs.append((int(step), float(rate)))
            return tuple(pairs)
        if key == "checkpoints":
            return tuple(p for p in raw.split(",") if p)
        if key in ("variant", "backbone", "csn_input", "manifest", "out"):
            return raw
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"cannot parse {key}={raw!r}: {exc}") from exc
    raise ConfigError(f"unknown config key {key!r}")


def _format_value(key: str, value) -> str:
    if key == "extent":
        return ",".join(str(v) for v in value)
    if key == "beta":
        return ",".join(repr(float(v)) for v in value)
    if key == "lr_schedule":
        return ",".join(f"{s}:{r!r}" for s, r in value)
    if key == "checkpoints":
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse key=value lines (# comments and blank lines allowed)."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config file, then overrides; validates everything."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(), source=str(p)))
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    cfg = replace(RunConfig(), **values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    try:
        cfg.arch_spec()
        cfg.train_spec()
        cfg.cohort_params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    if cfg.backbone not in BACKBONES:
        raise ConfigError(f"unknown backbone {cfg.backbone!r}")
    if cfg.csn_input not in CSN_INPUTS:
        raise ConfigError(f"unknown csn_input {cfg.csn_input!r}")
    if not 0 <= cfg.val_fold <= 4:
        raise ConfigError(f"val_fold must be in 0..4, got {cfg.val_fold}")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")


def write_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{f.name}={_format_value(f.name, getattr(cfg, f.name))}"
             for f in fields(RunConfig)]
    path.write_text("\n".join(lines) + "\n")


def read_config(path: str | Path) -> RunConfig:
    return load_config(path)
