"""Sign-gradient ascent on the attack objective with l-infinity projection.

The update is I_adv <- project(I_adv + step * sign(grad J)), with the
projection clamping first into the radius ball around the original and then
into the pixel range. Per-step J values are one-sample estimates and noisy;
the record also carries a periodic frozen-draw J_eval trace, which is the
quantity ascent claims are made about.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import torch

from .augment import AugmentSpec
from .backends import DiffusionSchedule, NoisePredictor
from .conditioners import ConditionerSpec
from .core import (
    BALL_TOLERANCE,
    InvariantViolation,
    NoiseBudget,
    ProtectionRecord,
    linf_norm,
    spawn_generator,
    validate_image,
)
from .losses import LossWeights, evaluate_objective, make_frozen_objective


def project_linf(
    candidate: torch.Tensor, original: torch.Tensor, radius: float
) -> torch.Tensor:
    """Clamp into [original - radius, original + radius], then into [0, 1]."""
    if candidate.shape != original.shape:
        raise ValueError("candidate shape must match original shape")
    if not radius > 0:
        raise ValueError("radius must be > 0")
    bounded = torch.maximum(
        torch.minimum(candidate, original + radius), original - radius
    )
    return bounded.clamp(0.0, 1.0)


def pgd_step(
    current: torch.Tensor,
    gradient: torch.Tensor,
    original: torch.Tensor,
    budget: NoiseBudget,
) -> torch.Tensor:
    """One ascent step followed by projection; sign(0) = 0."""
    if gradient.shape != current.shape:
        raise ValueError("gradient shape must match image shape")
    if not torch.isfinite(gradient).all():
        raise RuntimeError("gradient overflow")
    moved = current + budget.step * torch.sign(gradient)
    return project_linf(moved, original, budget.radius)


def _check_ball(current: torch.Tensor, original: torch.Tensor, radius: float, step: int) -> None:
    if linf_norm(current - original) > radius + BALL_TOLERANCE:
        raise InvariantViolation(f"ball invariant violated at step {step}")
    if current.min() < 0.0 or current.max() > 1.0:
        raise InvariantViolation(f"pixel range invariant violated at step {step}")


def pgd_protect(
    image: torch.Tensor,
    backends: Sequence[NoisePredictor],
    conditioners: Sequence[ConditionerSpec],
    weights: LossWeights,
    budget: NoiseBudget,
    schedule: DiffusionSchedule,
    augment: Optional[AugmentSpec] = None,
    seed: int = 0,
    num_samples: int = 1,
    conditional_target: str = "self",
    eval_interval: Optional[int] = 25,
    eval_samples: int = 8,
    random_start: bool = False,
    step_callback: Optional[Callable[[int, torch.Tensor, float], None]] = None,
) -> ProtectionRecord:
    """Run the full iterative protection on one image.

    The objective trace has budget.iterations + 1 entries: the value at the
    starting point, then the pre-update value at each subsequent iterate,
    and finally a fresh evaluation at the last iterate. When eval_interval
    is set, metadata["eval_trace"] additionally records the deterministic
    frozen-draw objective every eval_interval steps and at the end.
    """
    validate_image(image)
    if len(conditioners) != len(weights.w_con):
        raise ValueError(
            f"{len(conditioners)} conditioners for {len(weights.w_con)} conditional weights"
        )
    if not backends:
        raise ValueError("at least one backend is required")

    rng = spawn_generator(seed, 0)
    frozen = None
    if eval_interval is not None:
        if eval_interval < 1:
            raise ValueError("eval_interval must be >= 1 or None")
        frozen = make_frozen_objective(
            image,
            backends,
            conditioners,
            weights,
            schedule,
            spawn_generator(seed, 1),
            num_samples=eval_samples,
            conditional_target=conditional_target,
        )

    current = image.clone()
    if random_start:
        offset = (
            2.0 * torch.rand(image.shape, generator=rng, dtype=image.dtype) - 1.0
        ) * budget.radius
        current = project_linf(image + offset, image, budget.radius)

    trace: list[tuple[int, float]] = []
    eval_trace: list[tuple[int, float]] = []

    def run_objective(point: torch.Tensor) -> torch.Tensor:
        parts = evaluate_objective(
            point,
            image,
            backends,
            conditioners,
            weights,
            schedule,
            rng,
            num_samples,
            augment,
            conditional_target,
        )
        return parts.total

    for step in range(budget.iterations):
        if frozen is not None and step % eval_interval == 0:
            with torch.no_grad():
                eval_trace.append((step, float(frozen(current).total)))
        leaf = current.detach().requires_grad_(True)
        objective = run_objective(leaf)
        value = float(objective.detach())
        if not torch.isfinite(objective):
            raise RuntimeError(f"non-finite objective at step {step}")
        trace.append((step, value))
        (gradient,) = torch.autograd.grad(objective, leaf)
        with torch.no_grad():
            current = pgd_step(leaf.detach(), gradient, image, budget)
        _check_ball(current, image, budget.radius, step + 1)
        if step_callback is not None:
            step_callback(step, current, value)

    with torch.no_grad():
        final_value = float(run_objective(current))
        if frozen is not None:
            eval_trace.append((budget.iterations, float(frozen(current).total)))
    trace.append((budget.iterations, final_value))

    metadata = {
        "num_samples": num_samples,
        "conditional_target": conditional_target,
        "random_start": random_start,
        "augmented": augment is not None,
    }
    if frozen is not None:
        metadata["eval_trace"] = tuple(eval_trace)
        metadata["eval_samples"] = eval_samples

    return ProtectionRecord(
        original=image,
        perturbation=(current - image).detach(),
        protected=current.detach(),
        method="pgd",
        seed=seed,
        budget=budget,
        objective_trace=tuple(trace),
        backend_ids=tuple(b.identifier for b in backends),
        metadata=metadata,
    )
