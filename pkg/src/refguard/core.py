"""Shared domain types and pixel-range utilities.

Images are plain ``torch.Tensor``s of shape (H, W, 3) with float values in
[0, 1]; perturbations share the image's shape but are signed and unbounded
until projected. The dataclasses here are immutable value objects and safe
to share across parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

DEFAULT_RADIUS = 13.0 / 255.0
DEFAULT_STEP = 1e-3
DEFAULT_ITERATIONS = 300

BALL_TOLERANCE = 1e-6


class InvariantViolation(RuntimeError):
    """An internal post-condition failed (CLI maps this to exit code 3)."""


def validate_image(image: torch.Tensor, name: str = "image") -> torch.Tensor:
    """Check that a tensor is a valid (H, W, 3) image in [0, 1]."""
    if not isinstance(image, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(image).__name__}")
    if image.dim() != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValueError(f"{name}: non-finite pixel")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(f"{name}: values outside [0, 1]")
    return image


def clamp_to_pixel_range(values: torch.Tensor) -> torch.Tensor:
    """Clamp an unconstrained array into the valid pixel range [0, 1].

    Raises:
        ValueError: if any value is non-finite.
    """
    if not torch.isfinite(values).all():
        raise ValueError("non-finite pixel")
    return values.clamp(0.0, 1.0)


def linf_norm(delta: torch.Tensor) -> float:
    return float(delta.abs().max()) if delta.numel() else 0.0


def spawn_generator(seed: int, *key: int) -> torch.Generator:
    """Derive an independent torch generator from a seed and a spawn key.

    Uses numpy's SeedSequence so per-image / per-worker generators derived
    from (seed, index) are decorrelated and reproducible.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    child = int(ss.generate_state(1, dtype=np.uint64)[0])
    g = torch.Generator()
    g.manual_seed(child)
    return g


@dataclass(frozen=True)
class NoiseBudget:
    """L-infinity constraint set: ball radius, step size, iteration count."""

    radius: float = DEFAULT_RADIUS
    step: float = DEFAULT_STEP
    iterations: int = DEFAULT_ITERATIONS

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    """Weight vector of the total objective.

    ``w_con`` carries one entry per registered conditioner, in registry
    order. All entries must be nonnegative. Whether at least one attack
    weight is positive is checked at the configuration boundary via
    :meth:`has_attack_weight`, not here: degenerate all-regularization
    vectors are legal inputs to the loss functions themselves.
    """

    w_adv: float
    w_con: tuple[float, ...]
    w_reg: float

    def __init__(self, w_adv: float, w_con, w_reg: float):
        object.__setattr__(self, "w_adv", float(w_adv))
        object.__setattr__(self, "w_con", tuple(float(w) for w in w_con))
        object.__setattr__(self, "w_reg", float(w_reg))
        if self.w_adv < 0 or self.w_reg < 0 or any(w < 0 for w in self.w_con):
            raise ValueError("loss weights must be nonnegative")

    def has_attack_weight(self) -> bool:
        return self.w_adv > 0 or any(w > 0 for w in self.w_con)


PGD_WEIGHTS = LossWeights(3.0, (5.0, 5.0, 2.0, 2.0), 0.0)
ENCODER_WEIGHTS = LossWeights(30.0, (50.0, 60.0, 30.0, 30.0), 200.0)

_METHODS = ("pgd", "encoder")


@dataclass(frozen=True)
class ProtectionRecord:
    """One protected image plus everything needed to reproduce/re-apply it.

    The perturbation is stored separately from the protected image so
    robustness experiments can re-apply it to fresh copies.
    """

    original: torch.Tensor
    perturbation: torch.Tensor
    protected: torch.Tensor
    method: str
    seed: int
    budget: Optional[NoiseBudget]
    objective_trace: tuple[tuple[int, float], ...]
    backend_ids: tuple[str, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.perturbation.shape != self.original.shape:
            raise ValueError("perturbation shape must equal the source image shape")
        validate_image(self.original, "original")
        validate_image(self.protected, "protected")
        recon = clamp_to_pixel_range(self.original + self.perturbation)
        if linf_norm(self.protected - recon) > 1e-6:
            raise InvariantViolation("protected != clamp(original + perturbation)")
        if self.method == "pgd":
            if self.budget is None:
                raise ValueError("pgd records must carry a NoiseBudget")
            expected = self.budget.iterations + 1
            if len(self.objective_trace) != expected:
                raise InvariantViolation(
                    f"pgd objective_trace must have {expected} entries, "
                    f"got {len(self.objective_trace)}"
                )
            if linf_norm(self.perturbation) > self.budget.radius + BALL_TOLERANCE:
                raise InvariantViolation("projected perturbation exceeds the budget radius")
