"""Feed-forward protection: a ViT that emits pixel noise in one pass.

Training ascends the same objective PGD ascends, but amortized into encoder
weights (implemented as descending -J). Phase 1 holds the denoiser backends
and conditioners fixed; phase 2 periodically resamples the active backend
from a pool and rescales the conditional weights so the encoder cannot
overfit one target. The default config matches the documented full-scale
network (12 layers, hidden 384, 6 heads, 8x8 patches at 512); desk-scale
configs are first-class so the whole trainer runs in tests.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import torch
from torch import nn

from .augment import AugmentSpec
from .backends import DiffusionSchedule, NoisePredictor, resolve_backend
from .conditioners import ConditionerSpec, perturb_condition_weights
from .core import (
    InvariantViolation,
    LossWeights,
    ProtectionRecord,
    clamp_to_pixel_range,
    linf_norm,
    spawn_generator,
    validate_image,
)
from .losses import evaluate_objective

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 12
    hidden: int = 384
    heads: int = 6
    patch: int = 8
    resolution: int = 512
    mlp_ratio: float = 4.0
    output_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.layers, self.hidden, self.heads, self.patch, self.resolution) < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.resolution % self.patch:
            raise ValueError("resolution must be divisible by patch")
        if self.mlp_ratio <= 0 or self.output_scale <= 0:
            raise ValueError("mlp_ratio and output_scale must be positive")

    @property
    def tokens(self) -> int:
        side = self.resolution // self.patch
        return side * side


class _SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.qkv = nn.Linear(hidden, hidden * 3)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, d = x.shape
        qkv = self.qkv(x).reshape(n, 3, self.heads, self.head_dim).permute(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(n, d)
        return self.proj(out)


class _Block(nn.Module):
    """Pre-norm transformer block: x + attn(LN(x)), then x + mlp(LN(x))."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = _SelfAttention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden)
        inner = int(hidden * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, inner), nn.GELU(), nn.Linear(inner, hidden)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class NoiseEncoder(nn.Module):
    """Patch-tokenizing ViT mapping an image to an unclamped noise map.

    ``forward_calls`` counts forwards so inference-path contracts (exactly
    one pass per protected image) are checkable.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        patch_dim = config.patch * config.patch * 3
        self.patch_embed = nn.Linear(patch_dim, config.hidden)
        self.pos_embed = nn.Parameter(torch.zeros(config.tokens, config.hidden))
        self.blocks = nn.ModuleList(
            _Block(config.hidden, config.heads, config.mlp_ratio)
            for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(config.hidden)
        self.head = nn.Linear(config.hidden, patch_dim)
        self.forward_calls = 0

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if image.dim() != 3 or tuple(image.shape) != (cfg.resolution, cfg.resolution, 3):
            raise ValueError(
                f"encoder expects ({cfg.resolution}, {cfg.resolution}, 3) input, "
                f"got {tuple(image.shape)}"
            )
        self.forward_calls += 1
        p = cfg.patch
        side = cfg.resolution // p
        patches = (
            image.view(side, p, side, p, 3)
            .permute(0, 2, 1, 3, 4)
            .reshape(cfg.tokens, -1)
        )
        x = self.patch_embed(patches) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        out = self.head(x) * cfg.output_scale
        return (
            out.view(side, side, p, p, 3)
            .permute(0, 2, 1, 3, 4)
            .reshape(cfg.resolution, cfg.resolution, 3)
        )


def build_encoder(config: EncoderConfig, seed: int) -> NoiseEncoder:
    """Deterministically initialized encoder.

    The output head starts at zero so a fresh encoder is the identity
    protector (zero noise), which keeps early training stable.
    """
    encoder = NoiseEncoder(config)
    g = spawn_generator(seed)
    with torch.no_grad():
        for name, p in encoder.named_parameters():
            if name == "pos_embed":
                p.normal_(0.0, 0.02, generator=g)
            elif name.startswith("head."):
                p.zero_()
            elif p.dim() > 1:
                bound = p.shape[1] ** -0.5
                p.uniform_(-bound, bound, generator=g)
            elif name.endswith("bias"):
                p.zero_()
            # LayerNorm scales keep their default ones
    return encoder


def encoder_protect(
    encoder: NoiseEncoder,
    image: torch.Tensor,
    clamp_radius: Optional[float] = None,
    seed: int = 0,
) -> ProtectionRecord:
    """Protect one image with exactly one encoder forward pass."""
    validate_image(image)
    if clamp_radius is not None and not clamp_radius > 0:
        raise ValueError("clamp_radius must be > 0 when given")
    calls_before = encoder.forward_calls
    with torch.no_grad():
        noise = encoder(image)
    if encoder.forward_calls != calls_before + 1:
        raise InvariantViolation("encoder_protect must run exactly one forward pass")
    if clamp_radius is not None:
        noise = noise.clamp(-clamp_radius, clamp_radius)
    protected = clamp_to_pixel_range(image + noise)
    if clamp_radius is not None and linf_norm(protected - image) > clamp_radius + 1e-6:
        raise InvariantViolation("encoder output exceeds the requested clamp radius")
    return ProtectionRecord(
        original=image,
        perturbation=protected - image,
        protected=protected,
        method="encoder",
        seed=seed,
        budget=None,
        objective_trace=(),
        backend_ids=(),
        metadata={
            "clamp_radius": clamp_radius,
            "resolution": encoder.config.resolution,
        },
    )


@dataclass(frozen=True)
class PhaseSchedule:
    """Step counts for the two training phases and phase-2 switching."""

    phase1_steps: int
    phase2_steps: int = 0
    switch_interval: int = 1000
    backend_pool: tuple = ()
    weight_perturb_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self) -> None:
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("phase step counts must be >= 0")
        if self.switch_interval < 1:
            raise ValueError("switch_interval must be >= 1")
        if self.phase2_steps > 0 and not self.backend_pool:
            raise ValueError("phase 2 requires a non-empty backend_pool")
        lo, hi = self.weight_perturb_range
        if not (0 < lo <= hi):
            raise ValueError("weight_perturb_range must satisfy 0 < lo <= hi")

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 8
    grad_clip: float = 1.0
    num_samples: int = 1
    min_lr_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.grad_clip <= 0:
            raise ValueError("lr, batch_size and grad_clip must be positive")
        if not 0.0 <= self.min_lr_fraction <= 1.0:
            raise ValueError("min_lr_fraction must lie in [0, 1]")


@dataclass
class StepRecord:
    step: int
    phase: int
    objective: float
    unconditional: float
    regularization: float
    lr: float
    grad_norm: float
    backend_ids: tuple[str, ...]


@dataclass
class SwitchEvent:
    step: int
    backend_id: str
    w_con: tuple[float, ...]


@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)
    events: list = field(default_factory=list)
    diverged: bool = False
    divergence_step: Optional[int] = None

    def mean_objective(self, start: int, stop: int) -> float:
        window = [r.objective for r in self.steps[start:stop]]
        if not window:
            raise ValueError("empty window")
        return sum(window) / len(window)


def _cosine_lr(settings: TrainSettings, step: int, total: int) -> float:
    progress = step / max(total - 1, 1)
    floor = settings.min_lr_fraction
    return settings.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def _snapshot(encoder: NoiseEncoder) -> dict:
    return {k: v.detach().clone() for k, v in encoder.state_dict().items()}


def train_encoder(
    encoder: NoiseEncoder,
    dataset: Sequence[torch.Tensor],
    backends: Sequence[NoisePredictor],
    conditioners: Sequence[ConditionerSpec],
    weights: LossWeights,
    schedule: DiffusionSchedule,
    phases: PhaseSchedule,
    settings: TrainSettings = TrainSettings(),
    augment: Optional[AugmentSpec] = None,
    seed: int = 0,
    conditional_target: str = "self",
) -> TrainingLog:
    """Two-phase trainer; returns the per-step log.

    Phase 2 events fire at phase-2-local steps 0, switch_interval,
    2*switch_interval, ...: the active backend is resampled from the pool
    and the conditional weights are refreshed from the BASE vector (scale
    factors do not compound across switches). Non-finite objectives abort
    training with the encoder restored to its last good parameters and the
    log marked diverged.
    """
    images = [validate_image(img, f"dataset[{i}]") for i, img in enumerate(dataset)]
    if not images:
        raise ValueError("dataset is empty")
    if not backends:
        raise ValueError("at least one backend is required")
    if len(conditioners) != len(weights.w_con):
        raise ValueError(
            f"{len(conditioners)} conditioners for {len(weights.w_con)} conditional weights"
        )

    loss_rng = spawn_generator(seed, 10)
    batch_rng = spawn_generator(seed, 11)
    switch_rng = spawn_generator(seed, 12)
    weight_rng = spawn_generator(seed, 13)

    opt = torch.optim.Adam(encoder.parameters(), lr=settings.lr)
    log = TrainingLog()
    active_backends = tuple(backends)
    active_weights = weights
    last_good = _snapshot(encoder)

    for step in range(phases.total_steps):
        phase = 1 if step < phases.phase1_steps else 2
        if phase == 2:
            local = step - phases.phase1_steps
            if local % phases.switch_interval == 0:
                pick = int(
                    torch.randint(0, len(phases.backend_pool), (1,), generator=switch_rng).item()
                )
                entry = phases.backend_pool[pick]
                chosen = entry if isinstance(entry, NoisePredictor) else resolve_backend(entry)
                active_backends = (chosen,)
                active_weights = perturb_condition_weights(
                    weights, weight_rng, phases.weight_perturb_range
                )
                log.events.append(SwitchEvent(step, chosen.identifier, active_weights.w_con))

        lr = _cosine_lr(settings, step, phases.total_steps)
        for group in opt.param_groups:
            group["lr"] = lr

        idx = torch.randint(0, len(images), (settings.batch_size,), generator=batch_rng)
        objective_sum = None
        uncond_sum = 0.0
        reg_sum = 0.0
        finite = True
        for i in idx.tolist():
            img = images[i]
            noise = encoder(img)
            if not torch.isfinite(noise).all():
                finite = False
                break
            protected = (img + noise).clamp(0.0, 1.0)
            parts = evaluate_objective(
                protected,
                img,
                active_backends,
                conditioners,
                active_weights,
                schedule,
                loss_rng,
                settings.num_samples,
                augment,
                conditional_target,
            )
            if not torch.isfinite(parts.total):
                finite = False
                break
            objective_sum = parts.total if objective_sum is None else objective_sum + parts.total
            uncond_sum += float(parts.unconditional.detach())
            reg_sum += float(parts.regularization.detach())

        if not finite:
            encoder.load_state_dict(last_good)
            log.diverged = True
            log.divergence_step = step
            break

        mean_objective = objective_sum / settings.batch_size
        opt.zero_grad()
        (-mean_objective).backward()
        grad_norm = float(
            torch.nn.utils.clip_grad_norm_(encoder.parameters(), settings.grad_clip)
        )
        opt.step()
        last_good = _snapshot(encoder)
        log.steps.append(
            StepRecord(
                step=step,
                phase=phase,
                objective=float(mean_objective.detach()),
                unconditional=uncond_sum / settings.batch_size,
                regularization=reg_sum / settings.batch_size,
                lr=lr,
                grad_norm=grad_norm,
                backend_ids=tuple(b.identifier for b in active_backends),
            )
        )
    return log


def save_checkpoint(encoder: NoiseEncoder, path, step: int = 0) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(encoder.config),
        "step": int(step),
        "state_dict": encoder.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[NoiseEncoder, int]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {version!r}")
    config = EncoderConfig(**dict(payload["config"]))
    encoder = NoiseEncoder(config)
    encoder.load_state_dict(payload["state_dict"])
    encoder.eval()
    return encoder, int(payload["step"])
