"""Command-line surface: calibrate, attack, defend, evaluate, report.

Exit codes: 0 on success, 2 for validation/config errors, 3 for I/O and
container-format errors, 4 for numeric failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, load_patch, optimize_patch, optimize_patch_adaptive, save_patch
from .dataset import load_image, read_index
from .defense import DefenseConfig, config_from_json, defend_predict
from .detector import calibrate_reference, calibrate_threshold, load_profile, save_profile
from .errors import DataError, TokenShieldError, ValidationError
from .evaluation import evaluate, plot_data_csv_text, write_metrics_csv, write_report_json
from .model import load_model


def _load_dataset_images(data_dir):
    root = Path(data_dir)
    entries = read_index(root)
    if not entries:
        raise DataError(f"dataset {root} is empty")
    images, labels = [], []
    for e in entries:
        images.append(load_image(root / e.file))
        labels.append(e.label)
    return images, labels


def _cmd_calibrate(args) -> int:
    model = load_model(args.model)
    images, _ = _load_dataset_images(args.data)
    # First half fixes the reference distributions, second half the
    # threshold; a single image has to serve both roles.
    half = max(1, (len(images) + 1) // 2)
    ref_images = images[:half]
    tau_images = images[half:] or images
    profile = calibrate_reference(
        ref_images, model, temperature=args.temperature, layer=args.layer, alpha=args.alpha
    )
    profile = calibrate_threshold(profile, tau_images, model)
    save_profile(args.out, profile)
    print(
        json.dumps(
            {
                "profile": str(args.out),
                "tau": profile.tau,
                "alpha": profile.alpha,
                "layer": profile.layer,
                "temperature": profile.temperature,
                "reference_images": len(ref_images),
                "threshold_images": len(tau_images),
                "median_token_norm": profile.median_token_norm,
                "max_calibration_score": profile.max_calibration_score,
            }
        )
    )
    return 0


def _cmd_attack(args) -> int:
    model = load_model(args.model)
    images, labels = _load_dataset_images(args.data)
    cfg = AttackConfig(
        steps=args.steps,
        step_size=args.step_size,
        eot_samples=args.eot_samples,
        perturbation_scale=args.perturb_scale,
        target_label=args.target,
        jsd_cap=args.jsd_cap,
    )
    if args.adaptive:
        if not args.profile:
            raise ValidationError("--adaptive requires --profile")
        profile = load_profile(args.profile, model)
        result = optimize_patch_adaptive(
            model, images, labels, cfg, profile, args.seed, args.patch_size, count=args.count
        )
        cap = cfg.jsd_cap if cfg.jsd_cap is not None else profile.max_calibration_score
    else:
        result = optimize_patch(
            model, images, labels, cfg, args.seed, args.patch_size, count=args.count
        )
        cap = cfg.jsd_cap
    save_patch(
        args.out,
        result,
        {
            "target_label": args.target,
            "steps": args.steps,
            "seed": args.seed,
            "jsd_cap": cap,
        },
    )
    print(
        json.dumps(
            {
                "patch": str(args.out),
                "objective": result.objective,
                "initial_objective": result.initial_objective,
                "rejected_steps": result.rejected_steps,
            }
        )
    )
    return 0


def _cmd_defend(args) -> int:
    model = load_model(args.model)
    profile = load_profile(args.profile, model)
    config = config_from_json(Path(args.config).read_text())
    image = load_image(args.image)
    pred, diag = defend_predict(image, model, profile, config, image_index=args.image_index)
    print(
        json.dumps(
            {
                "top1": pred.top1,
                "top5": list(pred.top5),
                "probabilities": [float(p) for p in pred.probabilities],
                "logits": [float(v) for v in pred.logits],
                "flagged": list(diag.flagged),
                "scores": [float(s) for s in diag.scores],
                "tau": profile.tau,
            }
        )
    )
    return 0


def _cmd_evaluate(args) -> int:
    model = load_model(args.model)
    profile = load_profile(args.profile, model)
    config = config_from_json(Path(args.config).read_text())
    patch = None
    if args.patch:
        patch, _ = load_patch(args.patch)
    metrics = evaluate(args.data, model, profile, config, patch=patch, workers=args.workers)
    write_metrics_csv(args.out, metrics)
    if args.report:
        write_report_json(args.report, metrics, config)
    for name, s in metrics.conditions.items():
        print(f"{name}: top1={s.top1:.2f}% top5={s.top5:.2f}% flag_rate={s.flag_rate:.4f}")
    return 0


def _cmd_report(args) -> int:
    text = Path(args.metrics).read_text()
    Path(args.out).write_text(plot_data_csv_text(text))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenshield",
        description="Token-level adversarial patch defense for vision transformers",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="build a reference profile from clean images")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("attack", help="optimize an adversarial patch")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--eot-samples", type=int, default=16)
    p.add_argument("--perturb-scale", type=float, default=0.1)
    p.add_argument("--target", type=int, default=None, help="target class; omit for untargeted")
    p.add_argument("--adaptive", action="store_true", help="cap patch token scores")
    p.add_argument("--jsd-cap", type=float, default=None)
    p.add_argument("--profile", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("defend", help="defended prediction for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.set_defaults(func=_cmd_defend)

    p = sub.add_parser("evaluate", help="paired clean/attacked/defended evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patch", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="reshape metrics.csv into plot-ready long format")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TokenShieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
