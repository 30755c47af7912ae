"""Invisibility metrics, identity/quality scorers, robustness and transfer runs.

Real face-embedding and aesthetic models are external plugins registered at
runtime; the shipped toy scorers exist so every metric path is testable
offline. The robustness suite deliberately uses REAL (non-differentiable)
codecs and resamplers, unlike the differentiable surrogates inside the
attack loss: the question it answers is what survives actual preprocessing.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.signal import convolve2d

from .backends import DiffusionSchedule, NoisePredictor
from .core import InvariantViolation, ProtectionRecord, spawn_generator
from .losses import frozen_adv_term, make_frozen_draws

SCHEMA_VERSION = 1


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; inf if equal."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float = 1.0,
) -> float:
    """Mean structural similarity, computed per channel and averaged.

    Gaussian-weighted local statistics over valid windows only, so the
    image's smaller side must be at least the window size.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[0], a.shape[1]) < window_size:
        raise ValueError(f"image smaller than the {window_size}x{window_size} window")
    x = a.detach().cpu().numpy().astype(np.float64)
    y = b.detach().cpu().numpy().astype(np.float64)
    kernel = _gaussian_window(window_size, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    channel_means = []
    for ch in range(a.shape[2]):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mu_x = convolve2d(xc, kernel, mode="valid")
        mu_y = convolve2d(yc, kernel, mode="valid")
        var_x = convolve2d(xc * xc, kernel, mode="valid") - mu_x**2
        var_y = convolve2d(yc * yc, kernel, mode="valid") - mu_y**2
        cov = convolve2d(xc * yc, kernel, mode="valid") - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        )
        channel_means.append(score.mean())
    return float(np.mean(channel_means))


class EmbeddingFailure(RuntimeError):
    """A scorer could not embed an image (e.g. no face found)."""


@dataclass(frozen=True)
class EmbeddingScorer:
    """Named embedding function returning a unit-norm vector."""

    identifier: str
    embed: Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class QualityScorer:
    """Named scalar perceptual-quality head."""

    identifier: str
    score: Callable[[torch.Tensor], float]


def _unit_embedding(scorer: EmbeddingScorer, image: torch.Tensor) -> torch.Tensor:
    v = scorer.embed(image)
    norm = float(v.double().norm())
    if abs(norm - 1.0) > 1e-6:
        raise InvariantViolation(
            f"scorer {scorer.identifier}: embedding norm {norm} is not 1"
        )
    return v.double()


def ism(
    scorer: EmbeddingScorer, generated: torch.Tensor, reference: torch.Tensor
) -> Optional[float]:
    """Cosine similarity of the two embeddings; LOWER means the protected
    reference disrupted identity more. None when either embedding is
    undefined; aggregate with :func:`aggregate_ism`, which counts those.
    """
    try:
        a = _unit_embedding(scorer, generated)
        b = _unit_embedding(scorer, reference)
    except EmbeddingFailure:
        return None
    return float((a * b).sum())


def aggregate_ism(values: Sequence[Optional[float]]) -> tuple[Optional[float], int]:
    defined = [v for v in values if v is not None]
    undefined = len(values) - len(defined)
    mean = sum(defined) / len(defined) if defined else None
    return mean, undefined


def quality_score(scorer: QualityScorer, image: torch.Tensor) -> float:
    return float(scorer.score(image))


_EMBEDDING_SCORERS: dict[str, EmbeddingScorer] = {}
_QUALITY_SCORERS: dict[str, QualityScorer] = {}


def register_embedding_scorer(scorer: EmbeddingScorer) -> None:
    if scorer.identifier in _EMBEDDING_SCORERS:
        raise ValueError(f"embedding scorer already registered: {scorer.identifier}")
    _EMBEDDING_SCORERS[scorer.identifier] = scorer


def register_quality_scorer(scorer: QualityScorer) -> None:
    if scorer.identifier in _QUALITY_SCORERS:
        raise ValueError(f"quality scorer already registered: {scorer.identifier}")
    _QUALITY_SCORERS[scorer.identifier] = scorer


def get_embedding_scorer(identifier: str) -> EmbeddingScorer:
    if identifier not in _EMBEDDING_SCORERS:
        known = ", ".join(sorted(_EMBEDDING_SCORERS))
        raise KeyError(f"scorer unavailable: {identifier!r} (registered: {known})")
    return _EMBEDDING_SCORERS[identifier]


def get_quality_scorer(identifier: str) -> QualityScorer:
    if identifier not in _QUALITY_SCORERS:
        known = ", ".join(sorted(_QUALITY_SCORERS))
        raise KeyError(f"scorer unavailable: {identifier!r} (registered: {known})")
    return _QUALITY_SCORERS[identifier]


def make_toy_embedding_scorer(seed: int = 0, dim: int = 16) -> EmbeddingScorer:
    """Seeded linear projection of the pooled image, normalized to unit length.

    A degenerate (near-zero) projection raises EmbeddingFailure, standing in
    for a face detector that finds nothing.
    """
    g = torch.Generator().manual_seed(seed)
    weight = torch.randn(dim, 8 * 8 * 3, generator=g, dtype=torch.float64)
    weight /= 8.0 * math.sqrt(3.0)

    def embed(image: torch.Tensor) -> torch.Tensor:
        pooled = torch.nn.functional.adaptive_avg_pool2d(
            image.double().permute(2, 0, 1).unsqueeze(0), 8
        ).reshape(-1)
        v = weight @ pooled
        norm = float(v.norm())
        if norm < 1e-8:
            raise EmbeddingFailure("degenerate embedding")
        return v / norm

    return EmbeddingScorer(f"toy-embed-{seed}", embed)


def _register_default_scorers() -> None:
    if "toy-embed" not in _EMBEDDING_SCORERS:
        base = make_toy_embedding_scorer(seed=0)
        register_embedding_scorer(EmbeddingScorer("toy-embed", base.embed))
    if "toy-luminance" not in _QUALITY_SCORERS:
        register_quality_scorer(
            QualityScorer("toy-luminance", lambda img: float(img.mean()))
        )


_register_default_scorers()


TRANSFORM_KINDS = ("identity", "jpeg", "crop", "noise", "color")


@dataclass(frozen=True)
class RobustnessTransform:
    name: str
    kind: str
    value: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"kind must be one of {TRANSFORM_KINDS}")
        if self.kind == "jpeg" and not 1 <= int(self.value) <= 100:
            raise ValueError("jpeg quality must lie in [1, 100]")
        if self.kind == "crop" and not 0.0 < self.value <= 1.0:
            raise ValueError("crop fraction must lie in (0, 1]")
        if self.kind == "noise" and self.value < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.kind == "color" and self.value < 0:
            raise ValueError("color shift must be >= 0")


def parse_robustness_spec(spec: str) -> tuple[RobustnessTransform, ...]:
    """Parse "jpeg:75,crop:0.9,noise:0.01,color:0.05,identity"."""
    transforms = []
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        kind, _, raw = chunk.partition(":")
        kind = kind.strip()
        value = float(raw) if raw else 0.0
        transforms.append(RobustnessTransform(chunk, kind, value))
    if not transforms:
        raise ValueError("empty robustness spec")
    return tuple(transforms)


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().numpy()
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def _from_uint8(arr: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float64) / 255.0).to(dtype)


def apply_real_transform(
    image: torch.Tensor, transform: RobustnessTransform, rng: np.random.Generator
) -> torch.Tensor:
    """Apply one actual (non-differentiable) degradation.

    identity returns the float image untouched; the other kinds round-trip
    through 8-bit the way a saved file would.
    """
    if transform.kind == "identity":
        return image
    if transform.kind == "noise":
        arr = image.detach().cpu().numpy().astype(np.float64)
        noisy = arr + rng.normal(0.0, transform.value, size=arr.shape)
        return torch.from_numpy(np.clip(noisy, 0.0, 1.0)).to(image.dtype)
    if transform.kind == "color":
        arr = image.detach().cpu().numpy().astype(np.float64)
        factors = 1.0 + transform.value * rng.uniform(-1.0, 1.0, size=3)
        return torch.from_numpy(np.clip(arr * factors, 0.0, 1.0)).to(image.dtype)
    pil = Image.fromarray(_to_uint8(image))
    if transform.kind == "jpeg":
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=int(transform.value))
        buf.seek(0)
        out = np.asarray(Image.open(buf).convert("RGB"))
        return _from_uint8(out, image.dtype)
    # crop: central window, resized back
    h, w = image.shape[0], image.shape[1]
    ch = max(1, round(h * transform.value))
    cw = max(1, round(w * transform.value))
    top, left = (h - ch) // 2, (w - cw) // 2
    window = pil.crop((left, top, left + cw, top + ch))
    out = np.asarray(window.resize((w, h), Image.BICUBIC))
    return _from_uint8(out, image.dtype)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
    return obj


@dataclass
class EvalReport:
    metrics: dict
    sub_reports: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "metrics": _json_safe(self.metrics),
            "sub_reports": _json_safe(self.sub_reports),
            "metadata": _json_safe(self.metadata),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def robustness_suite(
    record: ProtectionRecord,
    transforms: Sequence[RobustnessTransform],
    backend: NoisePredictor,
    schedule: DiffusionSchedule,
    seed: int = 0,
    num_samples: int = 32,
) -> EvalReport:
    """Measure what remains of the attack after each real transform.

    Effectiveness of an image X is frozen_adv_term(X) - frozen_adv_term(clean)
    on shared draws; retention ratio is post-transform effectiveness over
    the untouched protected image's effectiveness. Stochastic transforms use
    the same realization on the protected and the clean image.
    """
    draws = make_frozen_draws(
        schedule,
        record.original.shape,
        spawn_generator(seed, 20),
        num_samples,
        dtype=record.original.dtype,
    )

    def effectiveness(image: torch.Tensor) -> float:
        with torch.no_grad():
            return float(frozen_adv_term(backend, image, schedule, draws))

    adv_clean = effectiveness(record.original)
    adv_protected = effectiveness(record.protected)
    base_margin = adv_protected - adv_clean

    sub_reports = {}
    for i, tr in enumerate(transforms):
        child = np.random.SeedSequence(entropy=seed, spawn_key=(100 + i,))
        transformed = apply_real_transform(
            record.protected, tr, np.random.default_rng(child)
        )
        child_clean = np.random.SeedSequence(entropy=seed, spawn_key=(100 + i,))
        transformed_clean = apply_real_transform(
            record.original, tr, np.random.default_rng(child_clean)
        )
        adv_t = effectiveness(transformed)
        adv_t_clean = effectiveness(transformed_clean)
        retention = (adv_t - adv_clean) / base_margin if abs(base_margin) > 1e-12 else None
        sub_reports[tr.name] = {
            "kind": tr.kind,
            "value": tr.value,
            "adv_transformed": adv_t,
            "adv_transformed_clean": adv_t_clean,
            "retention_ratio": retention,
            "psnr_after": psnr(transformed_clean, transformed),
            "ssim_after": ssim(transformed_clean, transformed)
            if min(record.original.shape[0], record.original.shape[1]) >= 11
            else None,
        }

    metrics = {
        "adv_clean": adv_clean,
        "adv_protected": adv_protected,
        "attack_margin": base_margin,
        "psnr": psnr(record.original, record.protected),
    }
    if min(record.original.shape[0], record.original.shape[1]) >= 11:
        metrics["ssim"] = ssim(record.original, record.protected)
    return EvalReport(
        metrics=metrics,
        sub_reports=sub_reports,
        metadata={
            "seed": seed,
            "num_samples": num_samples,
            "backend_id": backend.identifier,
            "method": record.method,
            "record_backend_ids": list(record.backend_ids),
        },
    )


def transfer_harness(
    record: ProtectionRecord,
    held_out_backend: NoisePredictor,
    schedule: DiffusionSchedule,
    seed: int = 0,
    num_samples: int = 32,
) -> tuple[float, float]:
    """Frozen-draw prediction error of a backend the record never saw.

    Returns (error_clean, error_protected) on identical draws; how much the
    protection transfers is the gap between them. No ordering is asserted
    here: sibling backends are expected to transfer, unrelated ones are a
    measurement.
    """
    if held_out_backend.identifier in record.backend_ids:
        raise ValueError(
            f"backend {held_out_backend.identifier!r} was used to build this record"
        )
    draws = make_frozen_draws(
        schedule,
        record.original.shape,
        spawn_generator(seed, 21),
        num_samples,
        dtype=record.original.dtype,
    )
    with torch.no_grad():
        error_clean = float(
            frozen_adv_term(held_out_backend, record.original, schedule, draws)
        )
        error_protected = float(
            frozen_adv_term(held_out_backend, record.protected, schedule, draws)
        )
    return error_clean, error_protected
