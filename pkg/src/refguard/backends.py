"""Noise-predicting denoiser backends and the diffusion forward process.

A backend is anything that predicts the Gaussian noise in a noised image
given a timestep and, optionally, reference-condition features. The seeded
toy backend lets the whole suite run with no pretrained weights; real
denoisers register themselves through :func:`register_backend`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import nn

from .conditioners import TOY_FEATURE_DIM, ConditionFeatures

DEFAULT_TIMESTEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal coefficients of the forward process."""

    num_timesteps: int
    alpha_bar: torch.Tensor

    def __post_init__(self) -> None:
        ab = self.alpha_bar
        if ab.dim() != 1 or ab.shape[0] != self.num_timesteps:
            raise ValueError("alpha_bar must be a 1-D array of length num_timesteps")
        if not ((ab > 0).all() and (ab <= 1).all()):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if self.num_timesteps > 1 and not (ab[1:] < ab[:-1]).all():
            raise ValueError("alpha_bar must be strictly decreasing")


def make_linear_schedule(
    num_timesteps: int = DEFAULT_TIMESTEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> DiffusionSchedule:
    """Build a linear-beta schedule with cumulative products of (1 - beta)."""
    if num_timesteps < 1:
        raise ValueError("num_timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    return DiffusionSchedule(num_timesteps, alpha_bar)


def add_noise(
    x0: torch.Tensor, eps: torch.Tensor, t: int, schedule: DiffusionSchedule
) -> torch.Tensor:
    """Forward-process sample sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if not 0 <= int(t) < schedule.num_timesteps:
        raise ValueError(f"timestep {t} outside [0, {schedule.num_timesteps})")
    if eps.shape != x0.shape:
        raise ValueError("eps shape must match x0 shape")
    ab = schedule.alpha_bar[int(t)].to(x0.dtype)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def _timestep_features(t: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    # transformer-style sinusoidal features of the raw timestep index
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    angles = float(t) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class _ToyDenoiser(nn.Module):
    """Shallow conv stack with timestep embedding and additive condition injection."""

    def __init__(self, width: int, cond_dim: int = TOY_FEATURE_DIM, emb_dim: int = 16):
        super().__init__()
        self.emb_dim = emb_dim
        self.conv_in = nn.Conv2d(3, width, 3, padding=1)
        self.conv_mid = nn.Conv2d(width, width, 3, padding=1)
        self.conv_out = nn.Conv2d(width, 3, 3, padding=1)
        self.time_proj = nn.Linear(emb_dim, width)
        self.cond_proj = nn.Linear(cond_dim, width)

    def forward(
        self, x: torch.Tensor, t: int, cond: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        # x: (H, W, 3) -> NCHW
        h = x.permute(2, 0, 1).unsqueeze(0)
        h = self.conv_in(h)
        temb = self.time_proj(_timestep_features(t, self.emb_dim, x.dtype))
        h = h + temb.view(1, -1, 1, 1)
        if cond is not None:
            h = h + self.cond_proj(cond).view(1, -1, 1, 1)
        h = torch.nn.functional.silu(h)
        h = torch.nn.functional.silu(self.conv_mid(h))
        h = self.conv_out(h)
        return h.squeeze(0).permute(1, 2, 0)


def seeded_init_(module: nn.Module, seed: int, bias_std: float = 0.0) -> nn.Module:
    """Deterministically re-initialize all parameters from a seed.

    Weights get uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases get
    N(0, bias_std) (zeros when bias_std is 0). Parameter registration
    order fixes the draw order.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.dim() > 1:
                fan_in = p.shape[1] * (p[0][0].numel() if p.dim() > 2 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=g)
            elif bias_std > 0:
                p.normal_(0.0, bias_std, generator=g)
            else:
                p.zero_()
    return module


class NoisePredictor:
    """A named, differentiable noise estimator epsilon(x_t, t, [c]).

    ``predict`` must return an array of x_t's shape, be deterministic given
    (inputs, weights), and keep gradients flowing to x_t and to the
    condition's source image.
    """

    def __init__(self, identifier: str, module: nn.Module):
        self.identifier = identifier
        self.module = module

    def predict(
        self,
        x_t: torch.Tensor,
        t: int,
        condition: Optional[ConditionFeatures] = None,
    ) -> torch.Tensor:
        cond = condition.features if condition is not None else None
        out = self.module(x_t, t, cond)
        if out.shape != x_t.shape:
            raise RuntimeError(
                f"backend {self.identifier}: output shape {tuple(out.shape)} "
                f"!= input shape {tuple(x_t.shape)}"
            )
        return out

    def parameters(self):
        return self.module.parameters()


def make_toy_backend(
    seed: int, width: int = 8, dtype: torch.dtype = torch.float32
) -> NoisePredictor:
    """Seeded desk-scale denoiser stand-in.

    Accepts an optional condition vector injected additively into an
    intermediate layer so conditional attacks are exercisable.
    """
    if width < 4:
        raise ValueError("width must be >= 4")
    module = _ToyDenoiser(width)
    seeded_init_(module, seed)
    module.to(dtype)
    return NoisePredictor(f"toy-seed{seed}", module)


def make_sibling_backend(
    backend: NoisePredictor, jitter_scale: float = 1e-2, seed: int = 0
) -> NoisePredictor:
    """Copy a backend and jitter its weights at a relative Gaussian scale.

    Operationalizes a structurally similar gray-box target for transfer
    experiments: same architecture, nearby weights.
    """
    import copy

    module = copy.deepcopy(backend.module)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            noise = torch.randn(p.shape, generator=g, dtype=p.dtype)
            scale = p.abs().mean().clamp_min(1e-8)
            p.add_(jitter_scale * scale * noise)
    return NoisePredictor(f"{backend.identifier}-sibling{seed}", module)


_BACKEND_FACTORIES: dict[str, Callable[..., NoisePredictor]] = {}


def register_backend(identifier: str, factory: Callable[..., NoisePredictor]) -> None:
    """Register a backend factory under a string identifier.

    The factory is called with an optional ``checkpoint=`` keyword when the
    configuration supplies a checkpoint path for the identifier.
    """
    if identifier in _BACKEND_FACTORIES:
        raise ValueError(f"backend id already registered: {identifier}")
    _BACKEND_FACTORIES[identifier] = factory


def resolve_backend(identifier: str, checkpoint: Optional[str] = None) -> NoisePredictor:
    if identifier not in _BACKEND_FACTORIES:
        known = ", ".join(sorted(_BACKEND_FACTORIES))
        raise KeyError(f"unknown backend id {identifier!r} (registered: {known})")
    factory = _BACKEND_FACTORIES[identifier]
    backend = factory(checkpoint=checkpoint) if checkpoint else factory()
    backend.identifier = identifier
    return backend


def registered_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKEND_FACTORIES))


def _register_default_toys() -> None:
    for name, seed in (("toy-a", 101), ("toy-b", 202), ("toy-c", 303)):
        _BACKEND_FACTORIES.setdefault(name, lambda seed=seed, **kw: make_toy_backend(seed))


_register_default_toys()
