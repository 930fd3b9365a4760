#!/usr/bin/env python3
# run_cfsc.py
"""
Command-line entry point for skeleton action recognition with the
cross-block semantic cascade.

    python run_cfsc.py synth --seed 7 --out data/synthetic
    python run_cfsc.py train --preset fencing --data data/synthetic/manifest.json --out output/run1
    python run_cfsc.py eval --checkpoint output/run1/checkpoint.cfsc --data data/synthetic/manifest.json
    python run_cfsc.py gradcheck --size tiny
    python run_cfsc.py ablate --axis lambda --seeds 0,1,2 --data data/synthetic/manifest.json
    python run_cfsc.py respond --checkpoint output/run1/checkpoint.cfsc --clip data/synthetic/clips/val/00_000.json

Exit codes: 0 success, 2 configuration or usage error, 3 runtime or numeric error.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from core.analysis import (AblateGrid, AblationAxis, ResponseSource, TINY_MODEL_CONFIG, joint_response,
                           model_gradient_check, run_ablation)
from core.cfsc import TapSet
from core.config import ExperimentConfig, PRESETS, Settings, load_experiment_config, preset
from core.data_pipeline import load_clip, load_manifest
from core.errors import CFSCError, ConfigError
from core.model import SkeletonActionModel
from core.parameter_store import read_checkpoint
from core.synthetic_fencing import SynthConfig, synth_dataset
from core.training import evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
GRADCHECK_TOLERANCE = 1e-4

# one block, C=2, T=8, N=3
BLOCK_MODEL_CONFIG = replace(TINY_MODEL_CONFIG, num_joints=3, channels=(2,), stride_blocks=(), taps=(1,),
                             target_t=8)


def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got '{text}'")


def _add_experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="experiment JSON {\"model\": ..., \"optim\": ...}")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a dataset preset")
    p.add_argument("--data", type=Path, required=True, help="dataset manifest JSON")
    p.add_argument("--out", type=Path, help="output folder (default: CFSC_OUTPUT_DIR)")
    p.add_argument("--seed", type=int)
    p.add_argument("--modality", choices=["joint", "bone"])
    p.add_argument("--lambda", dest="lam", type=float, help="λ for both the cascade and the final fusion")
    p.add_argument("--kt", type=int, help="cascade temporal kernel size")
    p.add_argument("--taps", help="tapped blocks, e.g. 4,7,10; 'none' disables the cascade")
    p.add_argument("--epochs", type=int)
    p.add_argument("--micro-batch", type=int, help="clips per forward/backward pass; gradients add up to one step")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run_cfsc.py", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint and reports")
    _add_experiment_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--out", type=Path)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of every model parameter")
    p.add_argument("--size", choices=["tiny", "block"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("synth", help="write a seeded synthetic fencing dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--train-per-class", type=int, default=10)
    p.add_argument("--val-per-class", type=int, default=3)
    p.add_argument("--topology", choices=["body18", "body25"], default="body18")
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--target-t", type=int, default=150)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("ablate", help="sweep λ, K_t, tap sets, cascade on/off or learned λ")
    _add_experiment_flags(p)
    p.add_argument("--axis", choices=[a.value for a in AblationAxis])
    p.add_argument("--grid", type=Path, help="grid JSON {\"axis\", \"values\", \"seeds\"}")
    p.add_argument("--seeds", type=_parse_seeds, default=[0])
    p.add_argument("--workers", type=int)

    p = sub.add_parser("respond", help="per-joint feature response for one clip")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--clip", type=Path, required=True)
    p.add_argument("--source", choices=[s.value for s in ResponseSource], default="cfsc")
    p.add_argument("--out", type=Path)
    p.add_argument("--quiet", action="store_true")
    return parser


def experiment_from_args(args) -> ExperimentConfig:
    """Config file or preset first, then individual flag overrides"""
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    exp = load_experiment_config(args.config) if args.config else preset(args.preset or "fencing")
    model, optim = exp.model, exp.optim
    if args.modality:
        model = replace(model, modality=args.modality)
    if args.lam is not None:
        model = replace(model, lambda_internal=args.lam, lambda_fusion=args.lam)
    if args.kt is not None:
        model = replace(model, kernel_size=args.kt)
    if args.taps:
        model = replace(model, taps=None if args.taps.lower() == "none" else TapSet.parse(args.taps).blocks)
    if args.seed is not None:
        optim = replace(optim, seed=args.seed)
    if args.epochs is not None:
        optim = replace(optim, epochs=args.epochs, warmup_epochs=min(optim.warmup_epochs, args.epochs - 1))
    if args.micro_batch is not None:
        optim = replace(optim, micro_batch=args.micro_batch)
    return ExperimentConfig(model, optim).require_valid()


def cmd_train(args, settings: Settings) -> int:
    exp = experiment_from_args(args)
    manifest = load_manifest(args.data)
    out = args.out or settings.output_dir / f"train_{exp.config_hash}"
    verbose = settings.verbose and not args.quiet

    result = train(exp.model, exp.optim, manifest, out, verbose=verbose, workers=settings.workers)
    exp.save(out / "config.json")
    if manifest.records("val"):
        evaluation = evaluate(result.checkpoint_path, manifest, "val", settings.workers)
        _write_evaluation(evaluation, out, result.report.config_hash, exp.optim.seed)
    print(f"✅ Training complete: best val top-1 {result.report.best_val_acc} "
          f"(hash {result.report.config_hash}) → {out}")
    return EXIT_OK


def _write_evaluation(evaluation, out: Path, hash_value: str, seed) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "confusion.csv", "w") as f:
        f.write(f"# config_hash={hash_value} seed={seed}\n")
        evaluation.confusion_frame().to_csv(f)
    with open(out / "per_class.csv", "w") as f:
        f.write(f"# config_hash={hash_value} seed={seed}\n")
        evaluation.per_class_frame().to_csv(f, index=False)
    doc = evaluation.to_dict()
    doc.update(config_hash=hash_value, seed=seed)
    with open(out / "eval.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def cmd_eval(args, settings: Settings) -> int:
    manifest = load_manifest(args.data)
    meta, _ = read_checkpoint(args.checkpoint)
    evaluation = evaluate(args.checkpoint, manifest, args.split, settings.workers)
    out = args.out or args.checkpoint.parent
    _write_evaluation(evaluation, out, meta.get("config_hash", ""), meta.get("seed"))
    print(f"📊 {args.split} top-1: {evaluation.top1:.4f} over {len(evaluation.labels)} clips")
    for name, acc in zip(evaluation.class_names, evaluation.per_class):
        print(f"   {name}: {'-' if acc is None else f'{acc:.3f}'}")
    print(f"💾 Evaluation saved to {out}")
    return EXIT_OK


def cmd_gradcheck(args, settings: Settings) -> int:
    config = TINY_MODEL_CONFIG if args.size == "tiny" else BLOCK_MODEL_CONFIG
    result = model_gradient_check(config, seed=args.seed, verbose=settings.verbose and not args.quiet)
    passed = result.passed(GRADCHECK_TOLERANCE)
    print(f"{'✅' if passed else '❌'} max relative error {result.max_rel_error:.3e} "
          f"(tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if passed else EXIT_RUNTIME


def cmd_synth(args, settings: Settings) -> int:
    config = SynthConfig(seed=args.seed, num_classes=args.classes, train_clips_per_class=args.train_per_class,
                         val_clips_per_class=args.val_per_class, topology=args.topology, noise=args.noise,
                         target_t=args.target_t)
    manifest, clips = synth_dataset(config, args.out, verbose=settings.verbose and not args.quiet)
    print(f"✅ {len(clips)} clips, {manifest.num_classes} classes → {args.out / 'manifest.json'}")
    return EXIT_OK


def cmd_ablate(args, settings: Settings) -> int:
    if bool(args.axis) == bool(args.grid):
        raise ConfigError("ablate needs exactly one of --axis or --grid")
    grid = AblateGrid.load(args.grid) if args.grid else AblateGrid.default(args.axis, args.seeds)
    exp = experiment_from_args(args)
    manifest = load_manifest(args.data)
    out = args.out or settings.output_dir / f"ablate_{grid.axis.value}_{exp.config_hash}"
    workers = args.workers or settings.workers

    result = run_ablation(grid, exp.model, exp.optim, manifest, workers, out,
                          verbose=settings.verbose and not args.quiet)
    print(result.summary.to_string(index=False))
    return EXIT_OK


def cmd_respond(args, settings: Settings) -> int:
    model = SkeletonActionModel.load(args.checkpoint)
    meta, _ = read_checkpoint(args.checkpoint)
    profile = joint_response(model, load_clip(args.clip), args.source, verbose=settings.verbose and not args.quiet)
    out = args.out or args.checkpoint.parent
    path = profile.save_csv(out / "response.csv", meta.get("config_hash", ""), meta.get("seed"))
    for name, value in profile.critical.items():
        print(f"   {name}: {value:.3f}")
    print(f"💾 Response profile saved to {path}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
            "ablate": cmd_ablate, "respond": cmd_respond}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        settings = Settings.from_env()
        return COMMANDS[args.command](args, settings)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CFSCError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ArithmeticError, RuntimeError) as e:
        print(f"❌ Runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
