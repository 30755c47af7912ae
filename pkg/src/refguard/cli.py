"""Command-line entry points: protect, train-encoder, evaluate.

Protected images are written as lossless 8-bit PNG next to a full-precision
perturbation sidecar (.npy) and a JSON manifest; a lossy output format would
silently destroy the perturbation it exists to carry. 8-bit quantization can
nudge the perturbation by up to 0.5/255, so the manifest records norms and
PSNR both before and after quantization.

Exit codes: 0 success, 2 usage or input error, 3 internal invariant failure.
"""

from __future__ import annotations

import argparse
import json
import os
import runpy
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .augment import AugmentSpec
from .backends import resolve_backend
from .conditioners import get_conditioner
from .config import ConfigError, RunConfig, default_config, parse_config
from .core import (
    InvariantViolation,
    NoiseBudget,
    ProtectionRecord,
    linf_norm,
)
from .encoder import (
    PhaseSchedule,
    TrainSettings,
    build_encoder,
    encoder_protect,
    load_checkpoint,
    save_checkpoint,
    train_encoder,
)
from .evaluation import (
    EvalReport,
    _json_safe,
    aggregate_ism,
    get_embedding_scorer,
    get_quality_scorer,
    ism,
    parse_robustness_spec,
    psnr,
    quality_score,
    robustness_suite,
    ssim,
)
from .pgd import pgd_protect

PLUGIN_ENV = "REFGUARD_PLUGIN_DIR"
MANIFEST_VERSION = 1


class UsageError(Exception):
    """Bad flags or unreadable inputs (exit code 2)."""


def load_image(path, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read image {path}: {err}") from err
    return torch.from_numpy(arr).to(dtype)


def save_png(image: torch.Tensor, path) -> None:
    arr = np.clip(np.round(image.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def quantize(image: torch.Tensor) -> torch.Tensor:
    """The image as it will read back after an 8-bit PNG round trip."""
    return torch.round(image * 255.0) / 255.0


def _load_plugins() -> list[str]:
    loaded = []
    raw = os.environ.get(PLUGIN_ENV, "")
    for directory in filter(None, raw.split(os.pathsep)):
        d = Path(directory)
        if not d.is_dir():
            print(f"warning: plugin directory {d} does not exist", file=sys.stderr)
            continue
        for path in sorted(d.glob("*.py")):
            runpy.run_path(str(path))
            loaded.append(str(path))
    return loaded


def _child_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _resolve_backends(ids, checkpoint=None):
    try:
        return [resolve_backend(i) for i in ids]
    except KeyError as err:
        raise UsageError(str(err.args[0])) from err


def _resolve_conditioners(ids):
    try:
        return [get_conditioner(i) for i in ids]
    except KeyError as err:
        raise UsageError(str(err.args[0])) from err


def _load_config(args) -> RunConfig:
    try:
        if getattr(args, "config", None):
            return parse_config(args.config)
        return default_config()
    except FileNotFoundError as err:
        raise UsageError(f"config file not found: {args.config}") from err
    except (ConfigError, ValueError) as err:
        raise UsageError(f"bad config: {err}") from err


def _protect_one(
    index: int,
    path: str,
    args,
    cfg: RunConfig,
    seed: int,
    budget: NoiseBudget,
    backends,
    conditioners,
    weights,
    schedule,
    augment: Optional[AugmentSpec],
    encoder,
) -> tuple[ProtectionRecord, Path, dict]:
    image = load_image(path)
    image_seed = _child_seed(seed, index)
    if args.method == "pgd":
        record = pgd_protect(
            image,
            backends,
            conditioners,
            weights,
            budget,
            schedule,
            augment=augment,
            seed=image_seed,
            num_samples=cfg.pgd.num_samples,
            conditional_target=cfg.pgd.conditional_target,
            eval_interval=cfg.pgd.eval_interval,
            eval_samples=cfg.pgd.eval_samples,
            random_start=cfg.pgd.random_start,
        )
    else:
        clamp = args.radius if args.radius is not None else cfg.encoder_clamp_radius
        try:
            record = encoder_protect(encoder, image, clamp_radius=clamp, seed=image_seed)
        except ValueError as err:
            raise UsageError(f"{path}: {err}") from err

    out_dir = Path(args.out)
    stem = Path(path).stem
    protected_path = out_dir / f"{stem}.protected.png"
    sidecar_path = out_dir / f"{stem}.perturbation.npy"
    manifest_path = out_dir / f"{stem}.manifest.json"

    save_png(record.protected, protected_path)
    np.save(sidecar_path, record.perturbation.numpy().astype(np.float32))

    quantized = quantize(record.protected)
    linf_pre = linf_norm(record.perturbation)
    linf_post = linf_norm(quantized - record.original)
    if budget is not None and args.method == "pgd":
        # half-step quantization slack on top of the optimization-time budget
        if linf_post > budget.radius + 0.5 / 255.0 + 1e-6:
            raise InvariantViolation(
                f"{path}: written perturbation exceeds the budget after quantization"
            )

    manifest = {
        "schema_version": MANIFEST_VERSION,
        "source": str(Path(path).resolve()),
        "protected": protected_path.name,
        "perturbation": sidecar_path.name,
        "method": record.method,
        "seed": seed,
        "image_seed": image_seed,
        "backend_ids": list(record.backend_ids),
        "conditioner_ids": [c.identifier for c in conditioners] if args.method == "pgd" else [],
        "budget": None
        if record.budget is None
        else {
            "radius": record.budget.radius,
            "step": record.budget.step,
            "iterations": record.budget.iterations,
        },
        "linf_pre_quant": linf_pre,
        "linf_post_quant": linf_post,
        "psnr_pre_quant": psnr(record.original, record.protected),
        "psnr_post_quant": psnr(record.original, quantized),
        "objective_trace": [[s, v] for s, v in record.objective_trace],
        "metadata": record.metadata,
        "config_digest": cfg.digest(),
    }
    with open(manifest_path, "w") as fh:
        json.dump(_json_safe(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return record, manifest_path, manifest


def cmd_protect(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed

    budget = cfg.budget
    if args.method == "pgd" and (
        args.radius is not None or args.steps is not None or args.alpha is not None
    ):
        budget = NoiseBudget(
            radius=args.radius if args.radius is not None else cfg.budget.radius,
            step=args.alpha if args.alpha is not None else cfg.budget.step,
            iterations=args.steps if args.steps is not None else cfg.budget.iterations,
        )

    backend_ids = tuple(args.backend) if args.backend else cfg.backends
    conditioner_ids = tuple(args.conditioner) if args.conditioner else cfg.conditioners
    backends = _resolve_backends(backend_ids)
    conditioners = _resolve_conditioners(conditioner_ids)
    weights = cfg.pgd_weights
    if args.method == "pgd" and len(weights.w_con) != len(conditioners):
        raise UsageError(
            f"pgd_weights.w_con has {len(weights.w_con)} entries for "
            f"{len(conditioners)} conditioners"
        )
    schedule = cfg.make_schedule()

    encoder = None
    if args.method == "encoder":
        if not args.checkpoint:
            raise UsageError("encoder method requires --checkpoint")
        try:
            encoder, _ = load_checkpoint(args.checkpoint)
        except FileNotFoundError as err:
            raise UsageError(f"checkpoint not found: {args.checkpoint}") from err

    for path in args.inputs:
        if not Path(path).is_file():
            raise UsageError(f"input does not exist: {path}")
    Path(args.out).mkdir(parents=True, exist_ok=True)

    def job(pair):
        index, path = pair
        return _protect_one(
            index, path, args, cfg, seed, budget, backends, conditioners,
            weights, schedule, cfg.augment, encoder,
        )

    tasks = list(enumerate(args.inputs))
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(job, tasks))
    else:
        results = [job(t) for t in tasks]

    for record, manifest_path, manifest in results:
        print(
            f"{manifest['source']} -> {manifest['protected']}  "
            f"linf={manifest['linf_post_quant']:.6f}  "
            f"psnr={manifest['psnr_post_quant']:.2f}dB"
        )
    return 0


def _collect_dataset(directory, resolution: int) -> list[torch.Tensor]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"dataset directory does not exist: {directory}")
    paths = sorted(
        p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    images = []
    for p in paths:
        try:
            with Image.open(p) as img:
                resized = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
        except (OSError, ValueError) as err:
            raise UsageError(f"cannot read image {p}: {err}") from err
        arr = np.asarray(resized, dtype=np.float64) / 255.0
        images.append(torch.from_numpy(arr).to(torch.float32))
    if not images:
        raise UsageError(f"no images found in {directory}")
    return images


def cmd_train_encoder(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    dataset = _collect_dataset(args.inputs[0], cfg.encoder.resolution)

    start_step = 0
    if args.checkpoint:
        try:
            encoder, start_step = load_checkpoint(args.checkpoint)
        except FileNotFoundError as err:
            raise UsageError(f"checkpoint not found: {args.checkpoint}") from err
        if encoder.config != cfg.encoder:
            raise UsageError("checkpoint encoder config does not match the configuration")
    else:
        encoder = build_encoder(cfg.encoder, seed)

    backends = _resolve_backends(cfg.backends)
    conditioners = _resolve_conditioners(cfg.conditioners)
    phases = PhaseSchedule(
        phase1_steps=cfg.training.phase1_steps,
        phase2_steps=cfg.training.phase2_steps,
        switch_interval=cfg.training.switch_interval,
        backend_pool=cfg.training.backend_pool,
        weight_perturb_range=cfg.training.weight_perturb_range,
    )
    settings = TrainSettings(
        lr=cfg.training.lr,
        batch_size=cfg.training.batch_size,
        grad_clip=cfg.training.grad_clip,
        num_samples=cfg.training.num_samples,
    )
    log = train_encoder(
        encoder,
        dataset,
        backends,
        conditioners,
        cfg.encoder_weights,
        cfg.make_schedule(),
        phases,
        settings,
        augment=cfg.augment,
        seed=seed,
        conditional_target=cfg.pgd.conditional_target,
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    final_step = start_step + len(log.steps)
    ckpt_path = out_dir / "encoder.ckpt"
    save_checkpoint(encoder, ckpt_path, step=final_step)
    log_path = out_dir / "training_log.json"
    payload = {
        "schema_version": MANIFEST_VERSION,
        "seed": seed,
        "start_step": start_step,
        "final_step": final_step,
        "diverged": log.diverged,
        "divergence_step": log.divergence_step,
        "events": [
            {"step": e.step, "backend_id": e.backend_id, "w_con": list(e.w_con)}
            for e in log.events
        ],
        "steps": [
            {
                "step": r.step,
                "phase": r.phase,
                "objective": r.objective,
                "lr": r.lr,
                "grad_norm": r.grad_norm,
                "backend_ids": list(r.backend_ids),
            }
            for r in log.steps
        ],
        "config_digest": cfg.digest(),
    }
    with open(log_path, "w") as fh:
        json.dump(_json_safe(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")

    if log.diverged:
        print(
            f"warning: training diverged at step {log.divergence_step}; "
            f"checkpoint holds the last good parameters",
            file=sys.stderr,
        )
    print(f"checkpoint: {ckpt_path}  steps: {final_step}  log: {log_path}")
    return 0


def record_from_manifest(manifest_path) -> tuple[ProtectionRecord, dict]:
    """Rebuild a ProtectionRecord from a manifest and its sidecar files."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    original = load_image(manifest["source"])
    perturbation = torch.from_numpy(
        np.load(manifest_path.parent / manifest["perturbation"])
    ).to(original.dtype)
    protected = (original + perturbation).clamp(0.0, 1.0)
    budget = None
    if manifest.get("budget"):
        b = manifest["budget"]
        budget = NoiseBudget(b["radius"], b["step"], b["iterations"])
    record = ProtectionRecord(
        original=original,
        perturbation=perturbation,
        protected=protected,
        method=manifest["method"],
        seed=manifest["image_seed"],
        budget=budget,
        objective_trace=tuple((int(s), float(v)) for s, v in manifest["objective_trace"]),
        backend_ids=tuple(manifest["backend_ids"]),
        metadata=dict(manifest.get("metadata", {})),
    )
    return record, manifest


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    embedding_scorer = None
    quality_scorer = None
    if cfg.scorers.embedding:
        try:
            embedding_scorer = get_embedding_scorer(cfg.scorers.embedding)
        except KeyError as err:
            raise UsageError(str(err.args[0])) from err
    if cfg.scorers.quality:
        try:
            quality_scorer = get_quality_scorer(cfg.scorers.quality)
        except KeyError as err:
            raise UsageError(str(err.args[0])) from err

    transforms = None
    if args.robustness:
        try:
            transforms = parse_robustness_spec(args.robustness)
        except ValueError as err:
            raise UsageError(f"bad --robustness spec: {err}") from err

    pair_reports = {}
    ism_values = []
    for item in args.inputs:
        record = None
        if item.endswith(".json"):
            if not Path(item).is_file():
                raise UsageError(f"manifest does not exist: {item}")
            record, manifest = record_from_manifest(item)
            original, protected = record.original, record.protected
            name = Path(item).stem.replace(".manifest", "")
        elif ":" in item:
            orig_path, _, prot_path = item.partition(":")
            original = load_image(orig_path)
            protected = load_image(prot_path)
            if original.shape != protected.shape:
                raise UsageError(f"{item}: image shapes differ")
            name = Path(prot_path).stem
        else:
            raise UsageError(
                f"evaluate input must be a manifest .json or an original:protected "
                f"pair, got {item!r}"
            )

        metrics = {"psnr": psnr(original, protected)}
        if min(original.shape[0], original.shape[1]) >= 11:
            metrics["ssim"] = ssim(original, protected)
        if embedding_scorer is not None:
            value = ism(embedding_scorer, protected, original)
            metrics["ism"] = value
            ism_values.append(value)
        if quality_scorer is not None:
            metrics["quality_original"] = quality_score(quality_scorer, original)
            metrics["quality_protected"] = quality_score(quality_scorer, protected)

        sub_reports = {}
        if transforms is not None:
            if record is None:
                raise UsageError(
                    "--robustness needs manifest inputs (the perturbation sidecar)"
                )
            backend_id = args.backend[0] if args.backend else cfg.backends[0]
            backend = _resolve_backends([backend_id])[0]
            rep = robustness_suite(
                record, transforms, backend, cfg.make_schedule(), seed=seed
            )
            sub_reports = rep.sub_reports
            metrics.update({f"robustness_{k}": v for k, v in rep.metrics.items()})

        pair_reports[name] = {"metrics": metrics, "sub_reports": sub_reports}

    summary_metrics = {}
    if ism_values:
        mean_ism, undefined = aggregate_ism(ism_values)
        summary_metrics["mean_ism"] = mean_ism
        summary_metrics["ism_undefined_count"] = undefined

    report = EvalReport(
        metrics=summary_metrics,
        sub_reports=pair_reports,
        metadata={
            "seed": seed,
            "config_digest": cfg.digest(),
            "inputs": list(args.inputs),
            "robustness": args.robustness,
            "embedding_scorer": cfg.scorers.embedding,
            "quality_scorer": cfg.scorers.quality,
        },
    )
    report_path = out_dir / "eval_report.json"
    report.save(report_path)
    for name, block in pair_reports.items():
        m = block["metrics"]
        psnr_text = "inf" if m["psnr"] == float("inf") else f"{m['psnr']:.3f}"
        line = f"{name}: psnr={psnr_text}dB"
        if "ssim" in m:
            line += f" ssim={m['ssim']:.4f}"
        print(line)
    print(f"report: {report_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refguard",
        description="Protect images against diffusion-based customization pipelines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, default=None, help="master seed")

    p_protect = sub.add_parser("protect", help="write protected copies of images")
    common(p_protect)
    p_protect.add_argument("--method", choices=("pgd", "encoder"), default="pgd")
    p_protect.add_argument("--in", dest="inputs", nargs="+", required=True, metavar="PATH")
    p_protect.add_argument("--out", required=True, metavar="DIR")
    p_protect.add_argument("--checkpoint", help="encoder checkpoint (encoder method)")
    p_protect.add_argument("--backend", action="append", metavar="ID")
    p_protect.add_argument("--conditioner", action="append", metavar="ID")
    p_protect.add_argument("--radius", type=float, default=None)
    p_protect.add_argument("--steps", type=int, default=None)
    p_protect.add_argument("--alpha", type=float, default=None)
    p_protect.add_argument("--workers", type=int, default=1)

    p_train = sub.add_parser("train-encoder", help="train the feed-forward protector")
    common(p_train)
    p_train.add_argument("--in", dest="inputs", nargs=1, required=True, metavar="DIR")
    p_train.add_argument("--out", required=True, metavar="DIR")
    p_train.add_argument("--checkpoint", help="resume from this checkpoint")

    p_eval = sub.add_parser("evaluate", help="score protected images")
    common(p_eval)
    p_eval.add_argument(
        "--in",
        dest="inputs",
        nargs="+",
        required=True,
        metavar="MANIFEST|ORIG:PROT",
    )
    p_eval.add_argument("--out", required=True, metavar="DIR")
    p_eval.add_argument("--robustness", metavar="SPEC")
    p_eval.add_argument("--backend", action="append", metavar="ID")
    return parser


_COMMANDS = {
    "protect": cmd_protect,
    "train-encoder": cmd_train_encoder,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _load_plugins()
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except InvariantViolation as err:
        print(f"internal invariant violation: {err}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())
