"""Command-line entry point.

Commands: gen-data, pretrain, linear-eval, finetune, dice.
Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
Every run writes its fully resolved config next to its outputs.
VOXELPAIR_THREADS caps worker threads (data workers and torch).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import downstream as ds
from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, RunConfig, load_run_config, run_config_to_dict, save_resolved_config
from .trainer import NonFiniteLossError, pyramid_config_for, read_metrics, run_pretraining, worker_count
from .volio import (
    DatasetManifest,
    VvolError,
    generate_synthetic_volume,
    load_dataset,
    load_labels,
    save_labels,
    save_volume,
)

USAGE_EXIT = 2
RUNTIME_EXIT = 1


class UsageError(ValueError):
    pass


def _apply_thread_cap() -> None:
    if os.environ.get("VOXELPAIR_THREADS"):
        torch.set_num_threads(worker_count())


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--shape must be X,Y,Z, got {text!r}")
    return tuple(int(p) for p in parts)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force to reuse)")
    out.mkdir(parents=True, exist_ok=True)
    shape = _parse_shape(args.shape)
    manifest = DatasetManifest(num_classes=args.classes)
    for i in range(args.count):
        lv = generate_synthetic_volume(args.seed + i, shape, args.classes)
        vol_name, lab_name = f"case_{i:03d}.vvol", f"case_{i:03d}.labels.vvol"
        save_volume(lv.volume, out / vol_name)
        save_labels(lv.labels, lv.volume.spacing, out / lab_name)
        manifest.cases.append(
            {"volume": vol_name, "labels": lab_name, "seed": args.seed + i}
        )
    manifest.save(out / "manifest.json")
    print(f"wrote {args.count} cases ({args.classes} classes, shape {shape}) to {out}")
    return 0


def _load_config(args) -> RunConfig:
    return load_run_config(args.config, args.override)


def _apply_ablation_flags(cfg: RunConfig, args) -> None:
    if getattr(args, "no_aug", False):
        cfg.ablation.augment = False
    if getattr(args, "no_recon", False):
        cfg.ablation.restorative = False
    if getattr(args, "no_contrastive", False):
        cfg.ablation.contrastive = False
    if getattr(args, "no_arch", False):
        cfg.ablation.rebalanced_arch = False
    if not (cfg.ablation.contrastive or cfg.ablation.restorative):
        raise UsageError("--no-recon and --no-contrastive cannot both be set")


def _out_dir(cfg: RunConfig, args) -> Path:
    out = getattr(args, "out", None) or cfg.paths.out
    if not out:
        raise ConfigError("no output directory: set paths.out in the config or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _labeled_dataset(cfg: RunConfig, args):
    data = getattr(args, "data", None) or cfg.paths.data
    if not data:
        raise ConfigError("no dataset: set paths.data in the config or pass --data")
    manifest = Path(data)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"dataset manifest not found: {manifest}")
    return load_dataset(manifest)


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    _apply_ablation_flags(cfg, args)
    out = _out_dir(cfg, args)
    save_resolved_config(cfg, out / "config_resolved_pretrain.yaml")
    cases, _ = _labeled_dataset(cfg, args)
    volumes = [lv.volume for lv in cases]
    final = run_pretraining(
        volumes,
        cfg.pyramid,
        cfg.trainer,
        cfg.augment,
        cfg.loss,
        cfg.ablation,
        out,
        config_snapshot=run_config_to_dict(cfg),
        log_every=args.log_every,
    )
    records = read_metrics(out)
    last = records[-1]
    print(
        f"pretraining done: {len(records)} steps, final l_total={last['l_total']:.4f} "
        f"(l_c={last['l_c']:.4f}, l_r={last['l_r']:.5f}); checkpoint {final}"
    )
    return 0


def _eval_command(args, mode: str) -> int:
    if args.from_scratch and args.checkpoint:
        raise UsageError("--from-scratch and --checkpoint are mutually exclusive")
    if not args.from_scratch and not args.checkpoint:
        raise UsageError(f"{mode} requires --checkpoint (or --from-scratch)")
    cfg = _load_config(args)
    _apply_ablation_flags(cfg, args)
    out = _out_dir(cfg, args)
    cases, num_classes = _labeled_dataset(cfg, args)

    run_mode = mode
    checkpoint = args.checkpoint
    if args.from_scratch:
        run_mode, checkpoint = "scratch", None
    elif checkpoint is not None:
        read_checkpoint(checkpoint)  # surface malformed archives before training

    arch = pyramid_config_for(cfg.ablation, cfg.pyramid)
    report = ds.evaluate_protocol(
        cases,
        num_classes,
        k_folds=args.folds,
        mode=run_mode,
        pyramid_cfg=arch,
        patch_size=cfg.trainer.patch_size,
        cfg=cfg.downstream,
        checkpoint_path=checkpoint,
        schedule=cfg.finetune if run_mode == "finetune" else None,
    )
    save_resolved_config(cfg, out / f"config_resolved_{mode}.yaml")
    results_path = out / f"results_{mode}{'_scratch' if args.from_scratch else ''}.json"
    results_path.write_text(json.dumps(report, indent=2))
    print(
        f"{mode} ({run_mode}): overall Dice {report['mean_overall']:.4f} "
        f"+/- {report['std_overall']:.4f} over {args.folds} folds -> {results_path}"
    )
    return 0


def cmd_linear_eval(args) -> int:
    return _eval_command(args, "linear")


def cmd_finetune(args) -> int:
    return _eval_command(args, "finetune")


def cmd_dice(args) -> int:
    pred, _ = load_labels(args.pred)
    true, _ = load_labels(args.true)
    num_classes = args.classes or int(max(pred.max(), true.max())) + 1
    result = ds.dice_score(pred, true, num_classes)
    payload = {
        "per_class": {f"class{c}": v for c, v in result.per_class.items()},
        "overall": result.overall,
    }
    print(json.dumps(payload, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelpair",
        description="Self-supervised voxel representation pretraining and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--shape", default="64,64,64")
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_gen_data)

    def add_common(p, with_eval_flags: bool):
        p.add_argument("--config", required=True)
        p.add_argument("--override", action="append", default=[], metavar="KEY.PATH=VALUE")
        p.add_argument("--data", help="dataset dir or manifest (defaults to paths.data)")
        p.add_argument("--out", help="output dir (defaults to paths.out)")
        p.add_argument("--no-aug", action="store_true", help="disable augmentations")
        p.add_argument("--no-recon", action="store_true", help="disable the restorative loss")
        p.add_argument("--no-contrastive", action="store_true", help="disable the contrastive loss")
        p.add_argument("--no-arch", action="store_true", help="use the deeper, thinner baseline pyramid")
        if with_eval_flags:
            p.add_argument("--checkpoint", help="pretraining checkpoint to start from")
            p.add_argument("--folds", type=int, default=3)
            p.add_argument("--from-scratch", action="store_true")

    pre = sub.add_parser("pretrain", help="run self-supervised pretraining")
    add_common(pre, with_eval_flags=False)
    pre.add_argument("--log-every", type=int, default=0, metavar="N")
    pre.set_defaults(func=cmd_pretrain)

    lin = sub.add_parser("linear-eval", help="linear probing with k-fold cross-validation")
    add_common(lin, with_eval_flags=True)
    lin.set_defaults(func=cmd_linear_eval)

    fin = sub.add_parser("finetune", help="fine-tune with the freeze/ramp schedule")
    add_common(fin, with_eval_flags=True)
    fin.set_defaults(func=cmd_finetune)

    dice = sub.add_parser("dice", help="score two .vvol label maps")
    dice.add_argument("pred")
    dice.add_argument("true")
    dice.add_argument("--classes", type=int, default=0)
    dice.set_defaults(func=cmd_dice)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_cap()
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (VvolError, CheckpointError, NonFiniteLossError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
