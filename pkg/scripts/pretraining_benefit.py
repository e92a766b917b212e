#!/usr/bin/env python3
"""Fine-tuning from a pretrained checkpoint vs training from scratch.

Both arms get an identical budget (same steps, batch, data, eval cases); the
fine-tuned arm starts from the given checkpoint and follows the freeze/ramp
schedule, the scratch arm trains backbone+head jointly from step one.

Example:
    python scripts/pretraining_benefit.py --data runs/data \
        --checkpoint runs/pretrain/ckpt_step_0002000.ckpt \
        --train-cases 4 --eval-cases 2 --steps 300 --seeds 0,1,2
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from voxelpair.backbone import build_model
from voxelpair.checkpoint import load_parameters, read_checkpoint
from voxelpair.downstream import (
    DownstreamConfig,
    FinetuneSchedule,
    aggregate_dice,
    evaluate_volumes,
    finetune,
)
from voxelpair.trainer import architecture_from_snapshot
from voxelpair.volio import load_dataset


def run_arm(arch, checkpoint, train_cases, eval_cases, num_classes, patch_size, cfg, schedule):
    model = build_model(arch, seed=cfg.seed)
    if checkpoint is not None:
        _, _, params, _ = read_checkpoint(checkpoint)
        load_parameters(model, params)
    head = finetune(model, train_cases, num_classes, patch_size, cfg, schedule)
    results = evaluate_volumes(model, head, eval_cases, patch_size, num_classes)
    return aggregate_dice(results, num_classes).overall


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True, help="dataset dir or manifest.json")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--train-cases", type=int, default=4)
    ap.add_argument("--eval-cases", type=int, default=2)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--patches-per-step", type=int, default=2)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--patch-size", type=int, default=32)
    ap.add_argument("--out", help="optional JSON report path")
    args = ap.parse_args()

    manifest = Path(args.data)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    cases, num_classes = load_dataset(manifest)
    if len(cases) < args.train_cases + args.eval_cases:
        raise SystemExit(
            f"need {args.train_cases + args.eval_cases} cases, dataset has {len(cases)}"
        )
    train_cases = cases[: args.train_cases]
    eval_cases = cases[args.train_cases : args.train_cases + args.eval_cases]
    patch_size = (args.patch_size,) * 3

    ckpt_config, _, _, _ = read_checkpoint(args.checkpoint)
    arch = architecture_from_snapshot(ckpt_config)
    schedule = FinetuneSchedule()

    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = DownstreamConfig(steps=args.steps, patches_per_step=args.patches_per_step, seed=seed)
        tuned = run_arm(
            arch, args.checkpoint, train_cases, eval_cases, num_classes, patch_size, cfg, schedule
        )
        scratch = run_arm(
            arch, None, train_cases, eval_cases, num_classes, patch_size, cfg, None
        )
        rows.append({"seed": seed, "finetuned": tuned, "from_scratch": scratch})
        print(
            f"seed {seed}: fine-tuned {tuned:.4f} vs from-scratch {scratch:.4f} "
            f"({'+' if tuned > scratch else '-'}{abs(tuned - scratch):.4f})"
        )

    wins = sum(r["finetuned"] > r["from_scratch"] for r in rows)
    print(f"fine-tuning wins {wins}/{len(rows)} seeds")
    if args.out:
        Path(args.out).write_text(json.dumps({"rows": rows, "wins": wins}, indent=2))


if __name__ == "__main__":
    main()
