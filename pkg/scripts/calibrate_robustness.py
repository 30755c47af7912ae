"""Pilot run that freezes the JPEG-retention margin fixture.

Protects one smooth synthetic image with PGD against a seeded toy backend,
re-encodes the result at JPEG quality 75, and records how much of the
prediction-error gap survives. The acceptance suite rebuilds the exact same
scenario from the fixture and asserts the margin is still there.

Smooth sinusoids, not uniform noise: random pixels are the worst case for
JPEG (the compression error swamps a 13/255 perturbation and can flip the
margin sign), while low-frequency content survives quantization mostly
intact. Run with --check to verify the current code still reproduces the
frozen numbers instead of overwriting them.
"""

import argparse
import json
import math
import pathlib
import sys

import torch

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from refguard.backends import make_linear_schedule, resolve_backend
from refguard.core import LossWeights, NoiseBudget
from refguard.evaluation import parse_robustness_spec, robustness_suite
from refguard.pgd import pgd_protect

FIXTURE = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "robustness_margin.json"

SCENARIO = {
    "image_seed": 1234,
    "resolution": 64,
    "base_level": 0.5,
    "amplitude": 0.35,
    "freq_low": 0.5,
    "freq_span": 3.0,
    "clamp_lo": 0.05,
    "clamp_hi": 0.95,
    "backend": "toy-a",
    "radius": 13.0 / 255.0,
    "step": 4e-3,
    "iterations": 300,
    "attack_seed": 0,
    "suite_seed": 0,
    "num_samples": 64,
    "transform": "jpeg:75",
}


def smooth_image(seed: int, resolution: int) -> torch.Tensor:
    """Per-channel sinusoidal gratings with seeded frequency and phase."""
    g = torch.Generator().manual_seed(seed)
    ys, xs = torch.meshgrid(
        torch.linspace(0, 1, resolution),
        torch.linspace(0, 1, resolution),
        indexing="ij",
    )
    img = torch.zeros(resolution, resolution, 3)
    for c in range(3):
        fx, fy = (torch.rand(2, generator=g) * SCENARIO["freq_span"] + SCENARIO["freq_low"]).tolist()
        phase = float(torch.rand((), generator=g)) * 2 * math.pi
        img[:, :, c] = SCENARIO["base_level"] + SCENARIO["amplitude"] * torch.sin(
            2 * math.pi * (fx * xs + fy * ys) + phase
        )
    return img.clamp(SCENARIO["clamp_lo"], SCENARIO["clamp_hi"])


def run_scenario() -> dict:
    schedule = make_linear_schedule()
    backend = resolve_backend(SCENARIO["backend"])
    image = smooth_image(SCENARIO["image_seed"], SCENARIO["resolution"])
    budget = NoiseBudget(
        radius=SCENARIO["radius"],
        step=SCENARIO["step"],
        iterations=SCENARIO["iterations"],
    )
    record = pgd_protect(
        image,
        [backend],
        (),
        LossWeights(1.0, (), 0.0),
        budget,
        schedule,
        seed=SCENARIO["attack_seed"],
        eval_interval=None,
    )
    report = robustness_suite(
        record,
        parse_robustness_spec(SCENARIO["transform"]),
        backend,
        schedule,
        seed=SCENARIO["suite_seed"],
        num_samples=SCENARIO["num_samples"],
    )
    sub = report.sub_reports[SCENARIO["transform"]]
    adv_clean = report.metrics["adv_clean"]
    adv_protected = report.metrics["adv_protected"]
    adv_transformed = sub["adv_transformed"]
    return {
        "adv_clean": adv_clean,
        "adv_protected": adv_protected,
        "adv_transformed": adv_transformed,
        "base_margin": adv_protected - adv_clean,
        "transformed_margin": adv_transformed - adv_clean,
        "retention_ratio": sub["retention_ratio"],
        "psnr_after_jpeg": sub["psnr_after"],
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--check", action="store_true",
                        help="re-run and compare against the frozen fixture")
    parser.add_argument("--out", type=pathlib.Path, default=FIXTURE)
    args = parser.parse_args()

    measured = run_scenario()
    for key, value in measured.items():
        print(f"{key:>20s}: {value:.6f}")

    if args.check:
        frozen = json.loads(FIXTURE.read_text())["measured"]
        worst = max(abs(measured[k] - frozen[k]) for k in frozen)
        print(f"max deviation from fixture: {worst:.3e}")
        return 0 if worst < 1e-3 else 1

    if measured["transformed_margin"] <= 0:
        print("refusing to freeze a non-positive margin", file=sys.stderr)
        return 1

    args.out.parent.mkdir(parents=True, exist_ok=True)
    payload = {"scenario": SCENARIO, "measured": measured}
    args.out.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
