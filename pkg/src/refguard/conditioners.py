"""Registry of reference-feature extractors.

A conditioner stands in for one attacked conditional module. The adapter
route feeds features into cross-attention, the reference-net route into
self-attention; the toy extractors here are seeded linear projections of a
downsampled image, enough to give each route a distinct, differentiable
feature path back to the source pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import torch
from torch import nn

ROUTES = ("cross_attention", "self_attention")
TOY_FEATURE_DIM = 32


@dataclass(frozen=True)
class ConditionFeatures:
    """Opaque reference features c, traceable back to their source image."""

    conditioner_id: str
    route: str
    features: torch.Tensor
    source_traceable: bool = True

    def __post_init__(self) -> None:
        if self.route not in ROUTES:
            raise ValueError(f"route must be one of {ROUTES}")
        if not torch.isfinite(self.features).all():
            raise ValueError("condition features must be finite")


@dataclass(frozen=True)
class ConditionerSpec:
    identifier: str
    route: str
    extract: Callable[[torch.Tensor], ConditionFeatures]
    weight_index: int

    def __post_init__(self) -> None:
        if self.route not in ROUTES:
            raise ValueError(f"route must be one of {ROUTES}")


def extract_condition(spec: ConditionerSpec, image: torch.Tensor) -> ConditionFeatures:
    """Run a conditioner on an image and validate the declared route."""
    features = spec.extract(image)
    if features.route != spec.route:
        raise ValueError(
            f"conditioner {spec.identifier}: extractor returned route "
            f"{features.route!r}, registered as {spec.route!r}"
        )
    return features


class _ToyExtractor(nn.Module):
    """Seeded linear projection of the 8x8 average-pooled image."""

    def __init__(self, seed: int, pool: int = 8, dim: int = TOY_FEATURE_DIM):
        super().__init__()
        self.pool = pool
        self.proj = nn.Linear(pool * pool * 3, dim)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            bound = (pool * pool * 3) ** -0.5
            self.proj.weight.uniform_(-bound, bound, generator=g)
            self.proj.bias.normal_(0.0, 0.1, generator=g)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = image.permute(2, 0, 1).unsqueeze(0)
        pooled = torch.nn.functional.adaptive_avg_pool2d(x, self.pool)
        weight = self.proj.weight.to(image.dtype)
        bias = self.proj.bias.to(image.dtype)
        return torch.nn.functional.linear(pooled.reshape(-1), weight, bias)


def make_toy_conditioner(
    identifier: str,
    route: str,
    seed: int,
    weight_index: int,
    expected_resolution: Optional[int] = None,
) -> ConditionerSpec:
    """Build a seeded toy conditioner.

    ``expected_resolution`` pins the input size the way a real extractor
    would; the default accepts any image of at least 8x8.
    """
    extractor = _ToyExtractor(seed)

    def extract(image: torch.Tensor) -> ConditionFeatures:
        h, w = image.shape[0], image.shape[1]
        if expected_resolution is not None and (h, w) != (expected_resolution,) * 2:
            raise ValueError(
                f"conditioner {identifier} expects resolution "
                f"{expected_resolution}x{expected_resolution}, got {h}x{w}"
            )
        if min(h, w) < 8:
            raise ValueError(f"conditioner {identifier} needs images of at least 8x8")
        return ConditionFeatures(identifier, route, extractor(image))

    return ConditionerSpec(identifier, route, extract, weight_index)


_CONDITIONERS: dict[str, ConditionerSpec] = {}


def register_conditioner(spec: ConditionerSpec) -> None:
    if spec.identifier in _CONDITIONERS:
        raise ValueError(f"conditioner id already registered: {spec.identifier}")
    _CONDITIONERS[spec.identifier] = spec


def get_conditioner(identifier: str) -> ConditionerSpec:
    if identifier not in _CONDITIONERS:
        known = ", ".join(sorted(_CONDITIONERS))
        raise KeyError(f"unknown conditioner id {identifier!r} (registered: {known})")
    return _CONDITIONERS[identifier]


def registered_conditioners() -> tuple[str, ...]:
    return tuple(sorted(_CONDITIONERS))


# The default set mirrors the four attacked module families: one adapter
# (cross-attention) plus image-customization, body-animation and
# face-animation reference networks (self-attention), with distinct seeds.
_DEFAULT_IDS = ("toy-adapter", "toy-ref-image", "toy-ref-body", "toy-ref-face")


def default_conditioners() -> list[ConditionerSpec]:
    """The four toy conditioners, in weight order."""
    return [get_conditioner(name) for name in _DEFAULT_IDS]


def _register_default_toys() -> None:
    routes = ("cross_attention", "self_attention", "self_attention", "self_attention")
    for idx, (name, route) in enumerate(zip(_DEFAULT_IDS, routes)):
        if name not in _CONDITIONERS:
            register_conditioner(make_toy_conditioner(name, route, seed=7000 + idx, weight_index=idx))


_register_default_toys()


def perturb_condition_weights(weights, rng: torch.Generator, factor_range=(0.5, 1.5)):
    """Scale each conditional weight by an independent uniform factor.

    ``w_adv`` and ``w_reg`` pass through untouched. Used by phase-2 training
    to keep the encoder from overfitting one weighting of the targets.
    """
    from .core import LossWeights

    lo, hi = float(factor_range[0]), float(factor_range[1])
    if not (lo > 0 and hi >= lo):
        raise ValueError("factor_range must satisfy 0 < lo <= hi")
    draws = torch.rand(len(weights.w_con), generator=rng, dtype=torch.float64)
    factors = lo + (hi - lo) * draws
    scaled = tuple(w * float(f) for w, f in zip(weights.w_con, factors))
    return LossWeights(weights.w_adv, scaled, weights.w_reg)
