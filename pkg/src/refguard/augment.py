"""Differentiable augmentations applied to the protected image inside the loss.

One op is sampled per call (single-sample expectation over transformations),
so robustness to preprocessing is bought by averaging over many attack steps
rather than by averaging inside a step. Every op keeps a gradient path back
to the input and maps [0, 1] images to [0, 1] images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping

import torch

from .core import clamp_to_pixel_range

KINDS = ("identity", "crop_resize", "jpeg", "gaussian_noise", "color_jitter")


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    probability: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        p = self.params
        if self.kind == "jpeg":
            lo, hi = p.get("min_quality", 50), p.get("max_quality", 95)
            if not (1 <= lo <= hi <= 100):
                raise ValueError("jpeg quality bounds must satisfy 1 <= lo <= hi <= 100")
        elif self.kind == "crop_resize":
            lo, hi = p.get("min_fraction", 0.8), p.get("max_fraction", 1.0)
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError("crop fraction bounds must lie in (0, 1]")
        elif self.kind == "gaussian_noise":
            if p.get("sigma", 2.0 / 255.0) < 0:
                raise ValueError("noise sigma must be >= 0")
        elif self.kind == "color_jitter":
            lo, hi = p.get("min_factor", 0.9), p.get("max_factor", 1.1)
            if not (0.0 < lo <= hi):
                raise ValueError("jitter factors must be positive with lo <= hi")
            if p.get("brightness", 0.05) < 0:
                raise ValueError("brightness range must be >= 0")


@dataclass(frozen=True)
class AugmentSpec:
    ops: tuple[AugmentOp, ...]

    def __init__(self, ops):
        object.__setattr__(self, "ops", tuple(ops))
        for op in self.ops:
            if not isinstance(op, AugmentOp):
                raise TypeError("AugmentSpec.ops must contain AugmentOp instances")


def default_augment_spec() -> AugmentSpec:
    """Identity half the time, otherwise one of the four real transforms."""
    return AugmentSpec(
        [
            AugmentOp("identity", probability=0.5),
            AugmentOp("crop_resize", {"min_fraction": 0.8, "max_fraction": 1.0}, 0.125),
            AugmentOp("jpeg", {"min_quality": 50, "max_quality": 95}, 0.125),
            AugmentOp("gaussian_noise", {"sigma": 2.0 / 255.0}, 0.125),
            AugmentOp(
                "color_jitter",
                {"min_factor": 0.9, "max_factor": 1.1, "brightness": 0.05},
                0.125,
            ),
        ]
    )


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    if hi <= lo:
        return float(lo)
    return float(lo + (hi - lo) * torch.rand((), generator=rng, dtype=torch.float64))


def _crop_resize(image: torch.Tensor, params: Mapping, rng: torch.Generator) -> torch.Tensor:
    h, w = image.shape[0], image.shape[1]
    frac = _uniform(rng, params.get("min_fraction", 0.8), params.get("max_fraction", 1.0))
    ch = max(1, round(h * frac))
    cw = max(1, round(w * frac))
    top = int(torch.randint(0, h - ch + 1, (1,), generator=rng).item())
    left = int(torch.randint(0, w - cw + 1, (1,), generator=rng).item())
    window = image[top : top + ch, left : left + cw, :]
    nchw = window.permute(2, 0, 1).unsqueeze(0)
    resized = torch.nn.functional.interpolate(
        nchw, size=(h, w), mode="bilinear", align_corners=False
    )
    return resized.squeeze(0).permute(1, 2, 0)


def _gaussian_noise(image: torch.Tensor, params: Mapping, rng: torch.Generator) -> torch.Tensor:
    sigma = float(params.get("sigma", 2.0 / 255.0))
    if sigma == 0.0:
        return image
    noise = torch.randn(image.shape, generator=rng, dtype=image.dtype)
    return image + sigma * noise


def _color_jitter(image: torch.Tensor, params: Mapping, rng: torch.Generator) -> torch.Tensor:
    lo, hi = params.get("min_factor", 0.9), params.get("max_factor", 1.1)
    brightness = float(params.get("brightness", 0.05))
    factors = torch.tensor(
        [_uniform(rng, lo, hi) for _ in range(3)], dtype=image.dtype
    )
    offset = _uniform(rng, -brightness, brightness)
    return image * factors.view(1, 1, 3) + offset


def apply_augment(
    image: torch.Tensor, spec: AugmentSpec, rng: torch.Generator
) -> torch.Tensor:
    """Sample one op from the spec and apply it.

    Probabilities are normalized into a categorical over the listed ops.
    An empty spec degrades to the identity with a warning so a
    misconfigured pipeline is loud but not fatal.
    """
    if not spec.ops:
        warnings.warn("empty augmentation spec, applying identity", RuntimeWarning)
        return image
    weights = torch.tensor([op.probability for op in spec.ops], dtype=torch.float64)
    if weights.sum() <= 0:
        warnings.warn("all augmentation probabilities zero, applying identity", RuntimeWarning)
        return image
    idx = int(torch.multinomial(weights, 1, generator=rng).item())
    op = spec.ops[idx]
    if op.kind == "identity":
        return image
    if op.kind == "crop_resize":
        out = _crop_resize(image, op.params, rng)
    elif op.kind == "jpeg":
        lo, hi = op.params.get("min_quality", 50), op.params.get("max_quality", 95)
        quality = int(torch.randint(int(lo), int(hi) + 1, (1,), generator=rng).item())
        out = diff_jpeg(image, quality)
    elif op.kind == "gaussian_noise":
        out = _gaussian_noise(image, op.params, rng)
    else:
        out = _color_jitter(image, op.params, rng)
    return out.clamp(0.0, 1.0)


# Base luma/chroma quantization tables (Annex K of the JFIF spec), row-major.
_LUMA_TABLE = torch.tensor(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=torch.float64,
)

_CHROMA_TABLE = torch.tensor(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=torch.float64,
)


def quality_tables(quality: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Scale the base tables with libjpeg's quality factor convention."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"jpeg quality must lie in [1, 100], got {quality}")
    q = int(quality)
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    tables = []
    for base in (_LUMA_TABLE, _CHROMA_TABLE):
        scaled = torch.floor((base * scale + 50.0) / 100.0).clamp(1.0, 255.0)
        tables.append(scaled)
    return tables[0], tables[1]


def _dct_matrix(dtype: torch.dtype) -> torch.Tensor:
    # orthonormal 8x8 DCT-II basis; JPEG's forward transform is A @ X @ A.T
    n = torch.arange(8, dtype=torch.float64)
    k = n.view(8, 1)
    mat = 0.5 * torch.cos((2.0 * n + 1.0) * k * torch.pi / 16.0)
    mat[0, :] = 1.0 / (8.0 ** 0.5)
    return mat.to(dtype)


def _blockify(plane: torch.Tensor) -> torch.Tensor:
    h, w = plane.shape
    return (
        plane.view(h // 8, 8, w // 8, 8).permute(0, 2, 1, 3).reshape(-1, 8, 8)
    )


def _unblockify(blocks: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return (
        blocks.view(h // 8, w // 8, 8, 8).permute(0, 2, 1, 3).reshape(h, w)
    )


def _straight_through_round(x: torch.Tensor) -> torch.Tensor:
    # forward: round; backward: identity
    return x + (torch.round(x) - x).detach()


_RGB_TO_YCC = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=torch.float64,
)

_YCC_TO_RGB = torch.tensor(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ],
    dtype=torch.float64,
)


def diff_jpeg(image: torch.Tensor, quality: int) -> torch.Tensor:
    """Differentiable JPEG surrogate: full-range YCbCr, 8x8 DCT, quantize.

    Quantization rounding uses a straight-through estimator so the output
    matches exact-rounding JPEG math in the forward pass while the backward
    pass sees the identity. No chroma subsampling (4:4:4) to keep the
    surrogate simple.
    """
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError("diff_jpeg needs images of at least 8x8")
    luma_q, chroma_q = quality_tables(quality)
    h, w = image.shape[0], image.shape[1]
    dtype = image.dtype
    pixels = image * 255.0

    ycc = pixels @ _RGB_TO_YCC.T.to(dtype)
    ycc = ycc + torch.tensor([0.0, 128.0, 128.0], dtype=dtype)

    pad_h = (-h) % 8
    pad_w = (-w) % 8
    if pad_h or pad_w:
        nchw = ycc.permute(2, 0, 1).unsqueeze(0)
        nchw = torch.nn.functional.pad(nchw, (0, pad_w, 0, pad_h), mode="replicate")
        ycc = nchw.squeeze(0).permute(1, 2, 0)
    ph, pw = h + pad_h, w + pad_w

    dct = _dct_matrix(dtype)
    planes = []
    for channel in range(3):
        table = (luma_q if channel == 0 else chroma_q).to(dtype)
        blocks = _blockify(ycc[:, :, channel] - 128.0)
        coefs = dct @ blocks @ dct.T
        quantized = _straight_through_round(coefs / table) * table
        restored = dct.T @ quantized @ dct
        planes.append(_unblockify(restored, ph, pw) + 128.0)
    ycc_out = torch.stack(planes, dim=2)[:h, :w, :]

    centered = ycc_out - torch.tensor([0.0, 128.0, 128.0], dtype=dtype)
    rgb = centered @ _YCC_TO_RGB.T.to(dtype)
    return (rgb / 255.0).clamp(0.0, 1.0)
