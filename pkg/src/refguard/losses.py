"""The unified attack objective and its frozen-draw evaluation variant.

The objective J is ASCENDED by the attack:

    J = w_adv * err_uncond + sum_i w_con_i * err_cond_i - w_reg * reg

where each err term is the denoiser's eps-prediction error (a mean over
Monte-Carlo draws of the summed squared residual) and reg is the pixel-space
MSE between protected and original. Larger J means the denoiser is worse on
the protected image while the image itself stays close to the original.

Per-step one-sample estimates of J are far too noisy to compare across
iterations, so ascent checks, transfer measurements and gradient tests all
go through :class:`FrozenObjective`, which evaluates the same expression on
a fixed set of (t, eps) draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .augment import AugmentSpec, apply_augment
from .backends import DiffusionSchedule, NoisePredictor, add_noise
from .conditioners import ConditionerSpec, ConditionFeatures, extract_condition
from .core import LossWeights

CONDITIONAL_TARGETS = ("self", "clean")


def adv_term(
    backend: NoisePredictor,
    image: torch.Tensor,
    schedule: DiffusionSchedule,
    rng: torch.Generator,
    condition: Optional[ConditionFeatures] = None,
    num_samples: int = 1,
) -> torch.Tensor:
    """Monte-Carlo estimate of the eps-prediction error on `image`.

    Each draw takes t uniform over [0, T), eps standard normal, noises the
    image and scores the backend's prediction by the summed squared
    residual. Always nonnegative; zero only for a perfect predictor.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    total = image.new_zeros(())
    for _ in range(num_samples):
        t = int(torch.randint(0, schedule.num_timesteps, (1,), generator=rng).item())
        eps = torch.randn(image.shape, generator=rng, dtype=image.dtype)
        x_t = add_noise(image, eps, t, schedule)
        pred = backend.predict(x_t, t, condition)
        total = total + ((eps - pred) ** 2).sum()
    return total / num_samples


def reg_loss(original: torch.Tensor, protected: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel difference between the two images."""
    if original.shape != protected.shape:
        raise ValueError(
            f"shape mismatch: {tuple(original.shape)} vs {tuple(protected.shape)}"
        )
    return ((protected - original) ** 2).mean()


def total_objective(weights: LossWeights, unconditional_error, conditional_errors, regularization):
    """Weighted total J; attack terms positive, regularization negative."""
    if len(conditional_errors) != len(weights.w_con):
        raise ValueError(
            f"got {len(conditional_errors)} conditional errors for "
            f"{len(weights.w_con)} conditional weights"
        )
    total = weights.w_adv * unconditional_error
    for w, err in zip(weights.w_con, conditional_errors):
        total = total + w * err
    return total - weights.w_reg * regularization


@dataclass(frozen=True)
class ObjectiveParts:
    """Scalar terms of one objective evaluation.

    Fields are 0-dim tensors and stay differentiable when the inputs were;
    cast with float() for logging.
    """

    unconditional: torch.Tensor
    conditional: tuple[torch.Tensor, ...]
    regularization: torch.Tensor
    total: torch.Tensor


def _mean_over_backends(backends, image, schedule, rng, condition, num_samples):
    terms = [
        adv_term(b, image, schedule, rng, condition, num_samples) for b in backends
    ]
    return sum(terms) / len(terms)


def evaluate_objective(
    candidate: torch.Tensor,
    original: torch.Tensor,
    backends: Sequence[NoisePredictor],
    conditioners: Sequence[ConditionerSpec],
    weights: LossWeights,
    schedule: DiffusionSchedule,
    rng: torch.Generator,
    num_samples: int = 1,
    augment_spec: Optional[AugmentSpec] = None,
    conditional_target: str = "self",
) -> ObjectiveParts:
    """One stochastic evaluation of J at `candidate`.

    When an augment spec is given, one op is sampled and the augmented view
    feeds BOTH the condition extraction and the noised-input path; the
    regularization always compares the raw candidate against the original.
    ``conditional_target`` picks where reference features come from: the
    candidate itself (self-reconstruction, the default) or the clean
    original.
    """
    if len(conditioners) != len(weights.w_con):
        raise ValueError(
            f"{len(conditioners)} conditioners for {len(weights.w_con)} conditional weights"
        )
    if conditional_target not in CONDITIONAL_TARGETS:
        raise ValueError(f"conditional_target must be one of {CONDITIONAL_TARGETS}")
    if not backends:
        raise ValueError("at least one backend is required")
    view = candidate
    if augment_spec is not None:
        view = apply_augment(candidate, augment_spec, rng)
    uncond = _mean_over_backends(backends, view, schedule, rng, None, num_samples)
    source = view if conditional_target == "self" else original
    conds = tuple(
        _mean_over_backends(
            backends, view, schedule, rng, extract_condition(spec, source), num_samples
        )
        for spec in conditioners
    )
    reg = reg_loss(original, candidate)
    return ObjectiveParts(uncond, conds, reg, total_objective(weights, uncond, conds, reg))


FrozenDraws = tuple[tuple[int, torch.Tensor], ...]


def make_frozen_draws(
    schedule: DiffusionSchedule,
    shape,
    rng: torch.Generator,
    num_samples: int = 8,
    dtype: torch.dtype = torch.float32,
) -> FrozenDraws:
    """Pre-draw (t, eps) pairs for deterministic objective evaluation."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    draws = []
    for _ in range(num_samples):
        t = int(torch.randint(0, schedule.num_timesteps, (1,), generator=rng).item())
        eps = torch.randn(tuple(shape), generator=rng, dtype=dtype)
        draws.append((t, eps))
    return tuple(draws)


def frozen_adv_term(
    backend: NoisePredictor,
    image: torch.Tensor,
    schedule: DiffusionSchedule,
    draws: FrozenDraws,
    condition: Optional[ConditionFeatures] = None,
) -> torch.Tensor:
    """adv_term evaluated on fixed draws; deterministic and differentiable."""
    total = image.new_zeros(())
    for t, eps in draws:
        e = eps.to(image.dtype)
        x_t = add_noise(image, e, t, schedule)
        pred = backend.predict(x_t, t, condition)
        total = total + ((e - pred) ** 2).sum()
    return total / len(draws)


@dataclass(frozen=True)
class FrozenObjective:
    """J on a fixed evaluation set: frozen (t, eps) draws, no augmentation.

    Calling it with an image returns ObjectiveParts; two calls with the same
    image give bit-identical values, so traces of this quantity are
    comparable across attack iterations.
    """

    original: torch.Tensor
    backends: tuple[NoisePredictor, ...]
    conditioners: tuple[ConditionerSpec, ...]
    weights: LossWeights
    schedule: DiffusionSchedule
    draws: FrozenDraws
    conditional_target: str = "self"

    def __post_init__(self) -> None:
        if len(self.conditioners) != len(self.weights.w_con):
            raise ValueError(
                f"{len(self.conditioners)} conditioners for "
                f"{len(self.weights.w_con)} conditional weights"
            )
        if self.conditional_target not in CONDITIONAL_TARGETS:
            raise ValueError(f"conditional_target must be one of {CONDITIONAL_TARGETS}")
        if not self.backends:
            raise ValueError("at least one backend is required")

    def term(self, image: torch.Tensor, condition: Optional[ConditionFeatures]) -> torch.Tensor:
        per_backend = [
            frozen_adv_term(b, image, self.schedule, self.draws, condition)
            for b in self.backends
        ]
        return sum(per_backend) / len(per_backend)

    def __call__(self, candidate: torch.Tensor) -> ObjectiveParts:
        uncond = self.term(candidate, None)
        source = candidate if self.conditional_target == "self" else self.original
        conds = tuple(
            self.term(candidate, extract_condition(spec, source))
            for spec in self.conditioners
        )
        reg = reg_loss(self.original, candidate)
        total = total_objective(self.weights, uncond, conds, reg)
        return ObjectiveParts(uncond, conds, reg, total)


def make_frozen_objective(
    original: torch.Tensor,
    backends: Sequence[NoisePredictor],
    conditioners: Sequence[ConditionerSpec],
    weights: LossWeights,
    schedule: DiffusionSchedule,
    rng: torch.Generator,
    num_samples: int = 8,
    conditional_target: str = "self",
) -> FrozenObjective:
    draws = make_frozen_draws(
        schedule, original.shape, rng, num_samples, dtype=original.dtype
    )
    return FrozenObjective(
        original,
        tuple(backends),
        tuple(conditioners),
        weights,
        schedule,
        draws,
        conditional_target,
    )
