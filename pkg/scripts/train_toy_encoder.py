"""Train a desk-scale noise encoder on synthetic images.

Phase 1 fits against a fixed backend; phase 2 resamples the backend from a
pool and refreshes the conditional weights at a fixed interval. The run
prints a windowed objective summary and saves a checkpoint that
`refguard protect --method encoder` can consume.
"""

import argparse
import pathlib
import sys

import torch

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from refguard.backends import make_linear_schedule, make_toy_backend
from refguard.conditioners import default_conditioners
from refguard.core import LossWeights
from refguard.encoder import (
    EncoderConfig,
    PhaseSchedule,
    TrainSettings,
    build_encoder,
    save_checkpoint,
    train_encoder,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--phase1-steps", type=int, default=100)
    parser.add_argument("--phase2-steps", type=int, default=100)
    parser.add_argument("--switch-interval", type=int, default=25)
    parser.add_argument("--resolution", type=int, default=16)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--hidden", type=int, default=32)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--patch", type=int, default=4)
    parser.add_argument("--dataset-size", type=int, default=8)
    parser.add_argument("--batch", type=int, default=2)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=pathlib.Path, default=pathlib.Path("encoder.ckpt"))
    args = parser.parse_args()

    config = EncoderConfig(
        layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        patch=args.patch,
        resolution=args.resolution,
    )
    encoder = build_encoder(config, seed=args.seed)
    n_params = sum(p.numel() for p in encoder.parameters())
    print(f"encoder: {n_params / 1e3:.1f}k params, {config.tokens} tokens")

    dataset = [
        torch.rand(
            args.resolution, args.resolution, 3,
            generator=torch.Generator().manual_seed(args.seed * 1000 + i),
        )
        for i in range(args.dataset_size)
    ]
    pool = (make_toy_backend(101), make_toy_backend(202), make_toy_backend(303))
    conditioners = default_conditioners()
    weights = LossWeights(30.0, (50.0, 60.0, 30.0, 30.0), 200.0)
    phases = PhaseSchedule(
        phase1_steps=args.phase1_steps,
        phase2_steps=args.phase2_steps,
        switch_interval=args.switch_interval,
        backend_pool=pool,
    )

    log = train_encoder(
        encoder,
        dataset,
        [pool[0]],
        conditioners,
        weights,
        make_linear_schedule(),
        phases,
        TrainSettings(lr=args.lr, batch_size=args.batch),
        seed=args.seed,
    )

    if log.diverged:
        print(f"DIVERGED at step {log.divergence_step}; checkpoint holds last good state")
    window = max(1, min(20, len(log.steps) // 4))
    print(f"objective mean: first {window} steps {log.mean_objective(0, window):.2f}, "
          f"last {window} steps {log.mean_objective(len(log.steps) - window, len(log.steps)):.2f}")
    for event in log.events:
        w = ", ".join(f"{x:.1f}" for x in event.w_con)
        print(f"  switch @ step {event.step:4d}: {event.backend_id}  w_con [{w}]")

    save_checkpoint(encoder, args.out, step=len(log.steps))
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
