#!/usr/bin/env python3
"""Linear-probe comparison of two pretrained checkpoints (e.g. full method vs
contrastive-only baseline): train a linear head on frozen features and report
held-out Dice per seed.

Example:
    python scripts/ablation_probe.py --data runs/data \
        --checkpoint-full runs/pretrain_full/ckpt_step_0002000.ckpt \
        --checkpoint-baseline runs/pretrain_baseline/ckpt_step_0002000.ckpt
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
    aggregate_dice,
    evaluate_volumes,
    train_linear_probe,
)
from voxelpair.trainer import architecture_from_snapshot
from voxelpair.volio import load_dataset


def probe(checkpoint, train_cases, eval_cases, num_classes, patch_size, cfg):
    config, _, params, _ = read_checkpoint(checkpoint)
    arch = architecture_from_snapshot(config)
    model = build_model(arch, seed=cfg.seed)
    load_parameters(model, params)
    head = train_linear_probe(model, train_cases, num_classes, patch_size, cfg)
    results = evaluate_volumes(model, head, eval_cases, patch_size, num_classes)
    return aggregate_dice(results, num_classes).overall


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--checkpoint-full", required=True)
    ap.add_argument("--checkpoint-baseline", required=True)
    ap.add_argument("--train-cases", type=int, default=4)
    ap.add_argument("--eval-cases", type=int, default=2)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--patches-per-step", type=int, default=2)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--patch-size", type=int, default=32)
    ap.add_argument("--out")
    args = ap.parse_args()

    manifest = Path(args.data)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    cases, num_classes = load_dataset(manifest)
    train_cases = cases[: args.train_cases]
    eval_cases = cases[args.train_cases : args.train_cases + args.eval_cases]
    patch_size = (args.patch_size,) * 3

    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = DownstreamConfig(steps=args.steps, patches_per_step=args.patches_per_step, seed=seed)
        full = probe(args.checkpoint_full, train_cases, eval_cases, num_classes, patch_size, cfg)
        base = probe(args.checkpoint_baseline, train_cases, eval_cases, num_classes, patch_size, cfg)
        rows.append({"seed": seed, "full_method": full, "baseline": base})
        print(f"seed {seed}: full {full:.4f} vs baseline {base:.4f}")

    wins = sum(r["full_method"] >= r["baseline"] for r in rows)
    print(f"full method >= baseline in {wins}/{len(rows)} seeds")
    if args.out:
        Path(args.out).write_text(json.dumps({"rows": rows, "wins": wins}, indent=2))


if __name__ == "__main__":
    main()
