"""Strict YAML configuration for the CLI and experiment scripts.

Every key is validated against the schema; unknown keys are rejected by
name rather than ignored, because a silently dropped override (a typoed
"raduis") would produce a weaker protection with no visible failure. An
empty file resolves to the full default configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .augment import AugmentOp, AugmentSpec, default_augment_spec
from .backends import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_TIMESTEPS,
    DiffusionSchedule,
    make_linear_schedule,
)
from .conditioners import _DEFAULT_IDS as _DEFAULT_CONDITIONER_IDS
from .core import ENCODER_WEIGHTS, PGD_WEIGHTS, LossWeights, NoiseBudget
from .encoder import EncoderConfig


class ConfigError(ValueError):
    """A configuration file violates the schema."""


def _check_keys(mapping: dict, allowed, section: str) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys in {section}: {', '.join(unknown)}")


def _as_mapping(value, section: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{section} must be a mapping")
    return value


@dataclass(frozen=True)
class PgdOptions:
    num_samples: int = 1
    eval_interval: Optional[int] = 25
    eval_samples: int = 8
    conditional_target: str = "self"
    random_start: bool = False


@dataclass(frozen=True)
class TrainingOptions:
    phase1_steps: int = 1000
    phase2_steps: int = 0
    switch_interval: int = 1000
    backend_pool: tuple[str, ...] = ()
    weight_perturb_range: tuple[float, float] = (0.5, 1.5)
    lr: float = 1e-3
    batch_size: int = 8
    grad_clip: float = 1.0
    num_samples: int = 1


@dataclass(frozen=True)
class ScorerOptions:
    embedding: Optional[str] = None
    quality: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    budget: NoiseBudget = field(default_factory=NoiseBudget)
    pgd_weights: LossWeights = PGD_WEIGHTS
    encoder_weights: LossWeights = ENCODER_WEIGHTS
    backends: tuple[str, ...] = ("toy-a",)
    conditioners: tuple[str, ...] = _DEFAULT_CONDITIONER_IDS
    num_timesteps: int = DEFAULT_TIMESTEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    augment: Optional[AugmentSpec] = None
    pgd: PgdOptions = PgdOptions()
    encoder: EncoderConfig = EncoderConfig()
    encoder_clamp_radius: Optional[float] = None
    training: TrainingOptions = TrainingOptions()
    scorers: ScorerOptions = ScorerOptions()

    def make_schedule(self) -> DiffusionSchedule:
        return make_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


_TOP_KEYS = (
    "seed",
    "budget",
    "pgd_weights",
    "encoder_weights",
    "backends",
    "conditioners",
    "schedule",
    "augment",
    "pgd",
    "encoder",
    "training",
    "scorers",
)


def _parse_budget(raw) -> NoiseBudget:
    d = _as_mapping(raw, "budget")
    _check_keys(d, ("radius", "step", "iterations"), "budget")
    default = NoiseBudget()
    try:
        return NoiseBudget(
            radius=float(d.get("radius", default.radius)),
            step=float(d.get("step", default.step)),
            iterations=int(d.get("iterations", default.iterations)),
        )
    except ValueError as err:
        raise ConfigError(f"budget: {err}") from err


def _parse_weights(raw, default: LossWeights, section: str) -> LossWeights:
    d = _as_mapping(raw, section)
    _check_keys(d, ("w_adv", "w_con", "w_reg"), section)
    w_con = d.get("w_con", default.w_con)
    if not isinstance(w_con, (list, tuple)):
        raise ConfigError(f"{section}.w_con must be a list")
    try:
        weights = LossWeights(
            d.get("w_adv", default.w_adv), w_con, d.get("w_reg", default.w_reg)
        )
    except ValueError as err:
        raise ConfigError(f"{section}: {err}") from err
    if not weights.has_attack_weight():
        raise ConfigError(f"{section}: at least one attack weight must be positive")
    return weights


def _parse_string_list(raw, default: tuple, section: str) -> tuple[str, ...]:
    if raw is None:
        return tuple(default)
    if not isinstance(raw, (list, tuple)) or not all(isinstance(x, str) for x in raw):
        raise ConfigError(f"{section} must be a list of identifiers")
    if not raw:
        raise ConfigError(f"{section} must not be empty")
    return tuple(raw)


def _parse_augment(raw) -> Optional[AugmentSpec]:
    d = _as_mapping(raw, "augment")
    _check_keys(d, ("enabled", "ops"), "augment")
    enabled = bool(d.get("enabled", True))
    if not enabled:
        return None
    if "ops" not in d or d["ops"] is None:
        return default_augment_spec()
    ops_raw = d["ops"]
    if not isinstance(ops_raw, list):
        raise ConfigError("augment.ops must be a list")
    ops = []
    for i, entry in enumerate(ops_raw):
        e = _as_mapping(entry, f"augment.ops[{i}]")
        _check_keys(e, ("kind", "probability", "params"), f"augment.ops[{i}]")
        if "kind" not in e:
            raise ConfigError(f"augment.ops[{i}]: missing kind")
        params = _as_mapping(e.get("params"), f"augment.ops[{i}].params")
        try:
            ops.append(AugmentOp(e["kind"], params, float(e.get("probability", 1.0))))
        except ValueError as err:
            raise ConfigError(f"augment.ops[{i}]: {err}") from err
    return AugmentSpec(ops)


def _parse_pgd(raw) -> PgdOptions:
    d = _as_mapping(raw, "pgd")
    allowed = ("num_samples", "eval_interval", "eval_samples", "conditional_target", "random_start")
    _check_keys(d, allowed, "pgd")
    default = PgdOptions()
    interval = d.get("eval_interval", default.eval_interval)
    opts = PgdOptions(
        num_samples=int(d.get("num_samples", default.num_samples)),
        eval_interval=None if interval is None else int(interval),
        eval_samples=int(d.get("eval_samples", default.eval_samples)),
        conditional_target=str(d.get("conditional_target", default.conditional_target)),
        random_start=bool(d.get("random_start", default.random_start)),
    )
    if opts.conditional_target not in ("self", "clean"):
        raise ConfigError("pgd.conditional_target must be 'self' or 'clean'")
    if opts.num_samples < 1 or opts.eval_samples < 1:
        raise ConfigError("pgd sample counts must be >= 1")
    if opts.eval_interval is not None and opts.eval_interval < 1:
        raise ConfigError("pgd.eval_interval must be >= 1 or null")
    return opts


def _parse_encoder(raw) -> tuple[EncoderConfig, Optional[float]]:
    d = _as_mapping(raw, "encoder")
    allowed = (
        "layers", "hidden", "heads", "patch", "resolution",
        "mlp_ratio", "output_scale", "clamp_radius",
    )
    _check_keys(d, allowed, "encoder")
    default = EncoderConfig()
    try:
        config = EncoderConfig(
            layers=int(d.get("layers", default.layers)),
            hidden=int(d.get("hidden", default.hidden)),
            heads=int(d.get("heads", default.heads)),
            patch=int(d.get("patch", default.patch)),
            resolution=int(d.get("resolution", default.resolution)),
            mlp_ratio=float(d.get("mlp_ratio", default.mlp_ratio)),
            output_scale=float(d.get("output_scale", default.output_scale)),
        )
    except ValueError as err:
        raise ConfigError(f"encoder: {err}") from err
    clamp = d.get("clamp_radius")
    if clamp is not None:
        clamp = float(clamp)
        if clamp <= 0:
            raise ConfigError("encoder.clamp_radius must be positive or null")
    return config, clamp


def _parse_training(raw) -> TrainingOptions:
    d = _as_mapping(raw, "training")
    allowed = (
        "phase1_steps", "phase2_steps", "switch_interval", "backend_pool",
        "weight_perturb_range", "lr", "batch_size", "grad_clip", "num_samples",
    )
    _check_keys(d, allowed, "training")
    default = TrainingOptions()
    band = d.get("weight_perturb_range", default.weight_perturb_range)
    if not isinstance(band, (list, tuple)) or len(band) != 2:
        raise ConfigError("training.weight_perturb_range must be [lo, hi]")
    pool = d.get("backend_pool", default.backend_pool)
    if not isinstance(pool, (list, tuple)):
        raise ConfigError("training.backend_pool must be a list")
    opts = TrainingOptions(
        phase1_steps=int(d.get("phase1_steps", default.phase1_steps)),
        phase2_steps=int(d.get("phase2_steps", default.phase2_steps)),
        switch_interval=int(d.get("switch_interval", default.switch_interval)),
        backend_pool=tuple(pool),
        weight_perturb_range=(float(band[0]), float(band[1])),
        lr=float(d.get("lr", default.lr)),
        batch_size=int(d.get("batch_size", default.batch_size)),
        grad_clip=float(d.get("grad_clip", default.grad_clip)),
        num_samples=int(d.get("num_samples", default.num_samples)),
    )
    if opts.lr <= 0 or opts.batch_size < 1 or opts.grad_clip <= 0:
        raise ConfigError("training: lr, batch_size and grad_clip must be positive")
    return opts


def _parse_scorers(raw) -> ScorerOptions:
    d = _as_mapping(raw, "scorers")
    _check_keys(d, ("embedding", "quality"), "scorers")
    return ScorerOptions(
        embedding=d.get("embedding"), quality=d.get("quality")
    )


def resolve_config(data: Optional[dict]) -> RunConfig:
    """Build a RunConfig from a raw (already-deserialized) mapping."""
    d = _as_mapping(data, "config")
    _check_keys(d, _TOP_KEYS, "config")

    schedule_raw = _as_mapping(d.get("schedule"), "schedule")
    _check_keys(schedule_raw, ("num_timesteps", "beta_start", "beta_end"), "schedule")
    encoder_config, encoder_clamp = _parse_encoder(d.get("encoder"))

    config = RunConfig(
        seed=int(d.get("seed", 0)),
        budget=_parse_budget(d.get("budget")),
        pgd_weights=_parse_weights(d.get("pgd_weights"), PGD_WEIGHTS, "pgd_weights"),
        encoder_weights=_parse_weights(
            d.get("encoder_weights"), ENCODER_WEIGHTS, "encoder_weights"
        ),
        backends=_parse_string_list(d.get("backends"), ("toy-a",), "backends"),
        conditioners=_parse_string_list(
            d.get("conditioners"), _DEFAULT_CONDITIONER_IDS, "conditioners"
        ),
        num_timesteps=int(schedule_raw.get("num_timesteps", DEFAULT_TIMESTEPS)),
        beta_start=float(schedule_raw.get("beta_start", DEFAULT_BETA_START)),
        beta_end=float(schedule_raw.get("beta_end", DEFAULT_BETA_END)),
        augment=_parse_augment(d.get("augment")),
        pgd=_parse_pgd(d.get("pgd")),
        encoder=encoder_config,
        encoder_clamp_radius=encoder_clamp,
        training=_parse_training(d.get("training")),
        scorers=_parse_scorers(d.get("scorers")),
    )
    if len(config.pgd_weights.w_con) != len(config.conditioners):
        raise ConfigError(
            f"pgd_weights.w_con has {len(config.pgd_weights.w_con)} entries for "
            f"{len(config.conditioners)} conditioners"
        )
    if len(config.encoder_weights.w_con) != len(config.conditioners):
        raise ConfigError(
            f"encoder_weights.w_con has {len(config.encoder_weights.w_con)} entries "
            f"for {len(config.conditioners)} conditioners"
        )
    try:
        config.make_schedule()
    except ValueError as err:
        raise ConfigError(f"schedule: {err}") from err
    return config


def parse_config(path) -> RunConfig:
    """Load and validate a YAML config file; empty file means all defaults."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return resolve_config(data)


def default_config() -> RunConfig:
    return resolve_config({})


def dump_default_config() -> str:
    """Render the default configuration as a commented YAML document."""
    cfg = default_config()
    doc = {
        "seed": cfg.seed,
        "budget": {
            "radius": cfg.budget.radius,
            "step": cfg.budget.step,
            "iterations": cfg.budget.iterations,
        },
        "pgd_weights": {
            "w_adv": cfg.pgd_weights.w_adv,
            "w_con": list(cfg.pgd_weights.w_con),
            "w_reg": cfg.pgd_weights.w_reg,
        },
        "encoder_weights": {
            "w_adv": cfg.encoder_weights.w_adv,
            "w_con": list(cfg.encoder_weights.w_con),
            "w_reg": cfg.encoder_weights.w_reg,
        },
        "backends": list(cfg.backends),
        "conditioners": list(cfg.conditioners),
        "schedule": {
            "num_timesteps": cfg.num_timesteps,
            "beta_start": cfg.beta_start,
            "beta_end": cfg.beta_end,
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)
