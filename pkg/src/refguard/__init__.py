"""Adversarial image protection against reference-based diffusion pipelines.

Two protectors share one objective: an iterative sign-gradient attack with
an l-infinity budget, and a feed-forward ViT that predicts protective noise
in a single pass. Everything runs offline on seeded toy denoisers; real
models plug in through the backend/conditioner/scorer registries.
"""

from .augment import AugmentOp, AugmentSpec, apply_augment, default_augment_spec, diff_jpeg
from .backends import (
    DiffusionSchedule,
    NoisePredictor,
    add_noise,
    make_linear_schedule,
    make_sibling_backend,
    make_toy_backend,
    register_backend,
    resolve_backend,
)
from .conditioners import (
    ConditionerSpec,
    ConditionFeatures,
    default_conditioners,
    extract_condition,
    get_conditioner,
    make_toy_conditioner,
    perturb_condition_weights,
    register_conditioner,
)
from .core import (
    ENCODER_WEIGHTS,
    PGD_WEIGHTS,
    InvariantViolation,
    LossWeights,
    NoiseBudget,
    ProtectionRecord,
    spawn_generator,
)
from .encoder import (
    EncoderConfig,
    NoiseEncoder,
    PhaseSchedule,
    TrainSettings,
    build_encoder,
    encoder_protect,
    load_checkpoint,
    save_checkpoint,
    train_encoder,
)
from .evaluation import (
    EmbeddingScorer,
    EvalReport,
    QualityScorer,
    aggregate_ism,
    ism,
    psnr,
    quality_score,
    robustness_suite,
    ssim,
    transfer_harness,
)
from .losses import (
    FrozenObjective,
    ObjectiveParts,
    adv_term,
    evaluate_objective,
    make_frozen_objective,
    reg_loss,
    total_objective,
)
from .pgd import pgd_protect, pgd_step, project_linf

__version__ = "0.1.0"

__all__ = [
    "AugmentOp",
    "AugmentSpec",
    "ConditionFeatures",
    "ConditionerSpec",
    "DiffusionSchedule",
    "EmbeddingScorer",
    "EncoderConfig",
    "ENCODER_WEIGHTS",
    "EvalReport",
    "FrozenObjective",
    "InvariantViolation",
    "LossWeights",
    "NoiseBudget",
    "NoiseEncoder",
    "NoisePredictor",
    "ObjectiveParts",
    "PGD_WEIGHTS",
    "PhaseSchedule",
    "ProtectionRecord",
    "QualityScorer",
    "TrainSettings",
    "add_noise",
    "adv_term",
    "aggregate_ism",
    "apply_augment",
    "build_encoder",
    "default_augment_spec",
    "default_conditioners",
    "diff_jpeg",
    "encoder_protect",
    "evaluate_objective",
    "extract_condition",
    "get_conditioner",
    "ism",
    "load_checkpoint",
    "make_frozen_objective",
    "make_linear_schedule",
    "make_sibling_backend",
    "make_toy_backend",
    "make_toy_conditioner",
    "pgd_protect",
    "pgd_step",
    "perturb_condition_weights",
    "project_linf",
    "psnr",
    "quality_score",
    "reg_loss",
    "register_backend",
    "register_conditioner",
    "resolve_backend",
    "robustness_suite",
    "save_checkpoint",
    "spawn_generator",
    "ssim",
    "total_objective",
    "train_encoder",
    "transfer_harness",
]
