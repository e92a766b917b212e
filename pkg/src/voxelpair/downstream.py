"""Downstream segmentation: linear probing, fine-tuning, Dice evaluation.

Heads consume the raw FPN pyramid (balancing projections and the projection
MLP are pretraining-only). Linear evaluation detaches the backbone, so no
gradient can reach it by construction. Fine-tuning freezes the backbone for
freeze_steps, then ramps its learning rate geometrically while the head
trains at a fixed rate throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import PyramidConfig, VoxelPairModel, _deterministic_init, build_model
from .checkpoint import load_parameters, read_checkpoint
from .volio import LabeledVolume


@dataclass
class FinetuneSchedule:
    freeze_steps: int = 60
    ramp_steps: int = 60
    lr_backbone_start: float = 3e-5
    lr_backbone_end: float = 3e-4
    lr_head: float = 3e-4

    def __post_init__(self):
        if self.freeze_steps < 0 or self.ramp_steps < 1:
            raise ValueError("freeze_steps must be >= 0 and ramp_steps >= 1")
        if min(self.lr_backbone_start, self.lr_backbone_end, self.lr_head) <= 0:
            raise ValueError("learning rates must be positive")

    def ramp_lr(self, t: int) -> float:
        """Geometric interpolation over ramp step t; endpoints are exact."""
        if t <= 0:
            return self.lr_backbone_start
        if t >= self.ramp_steps:
            return self.lr_backbone_end
        ratio = self.lr_backbone_end / self.lr_backbone_start
        return self.lr_backbone_start * ratio ** (t / self.ramp_steps)

    def backbone_lr(self, step: int) -> float:
        """Backbone lr at 1-based fine-tuning step: 0 while frozen, then the ramp."""
        if step <= self.freeze_steps:
            return 0.0
        return self.ramp_lr(step - self.freeze_steps - 1)


@dataclass
class DownstreamConfig:
    steps: int = 300
    patches_per_step: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.patches_per_step < 1:
            raise ValueError("downstream steps and patches_per_step must be >= 1")


@dataclass
class DiceResult:
    per_class: dict[int, float]
    overall: float


class LinearHead(nn.Module):
    """One 1x1x1 conv per pyramid level to class logits; levels are upsampled
    to full resolution and summed."""

    def __init__(self, level_channels: list[int], num_classes: int, seed: int = 0):
        super().__init__()
        self.level = nn.ModuleList(nn.Conv3d(ch, num_classes, 1) for ch in level_channels)
        _init_deterministic(self, seed)

    def forward(self, levels: list[torch.Tensor]) -> torch.Tensor:
        full = levels[0].shape[-3:]
        out = None
        for conv, lvl in zip(self.level, levels):
            logits = conv(lvl)
            if logits.shape[-3:] != full:
                logits = F.interpolate(logits, size=full, mode="trilinear", align_corners=False)
            out = logits if out is None else out + logits
        return out


class NonlinearHead(nn.Module):
    """Per-level 1x1x1 adapters summed at full resolution, two 3x3x3 convs
    with nonlinearity, then 1x1x1 to class logits."""

    def __init__(self, level_channels: list[int], num_classes: int, hidden: int = 16, seed: int = 0):
        super().__init__()
        self.level = nn.ModuleList(nn.Conv3d(ch, hidden, 1) for ch in level_channels)
        self.conv1 = nn.Conv3d(hidden, hidden, 3, padding=1)
        self.conv2 = nn.Conv3d(hidden, hidden, 3, padding=1)
        self.classify = nn.Conv3d(hidden, num_classes, 1)
        _init_deterministic(self, seed)

    def forward(self, levels: list[torch.Tensor]) -> torch.Tensor:
        full = levels[0].shape[-3:]
        merged = None
        for conv, lvl in zip(self.level, levels):
            x = conv(lvl)
            if x.shape[-3:] != full:
                x = F.interpolate(x, size=full, mode="trilinear", align_corners=False)
            merged = x if merged is None else merged + x
        x = F.gelu(self.conv1(F.gelu(merged)))
        x = F.gelu(self.conv2(x))
        return self.classify(x)


def _init_deterministic(module: nn.Module, seed: int) -> None:
    _deterministic_init(module, seed ^ 0x600D)


def linear_eval_forward(model: VoxelPairModel, head: LinearHead, patch) -> torch.Tensor:
    """Class-logit grid for one patch; the backbone is detached (frozen)."""
    t = torch.as_tensor(np.asarray(patch), dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        levels = model.pyramid(t[None, None])
    return head([lvl.detach() for lvl in levels])[0]


def _sample_labeled_batch(dataset, patch_size, count, rng):
    patches, labels = [], []
    for _ in range(count):
        lv = dataset[int(rng.integers(len(dataset)))]
        shape = lv.volume.data.shape
        origin = [int(rng.integers(0, shape[i] - patch_size[i] + 1)) for i in range(3)]
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_size))
        patches.append(lv.volume.data[sl])
        labels.append(lv.labels[sl])
    x = torch.as_tensor(np.stack(patches), dtype=torch.float32)[:, None]
    y = torch.as_tensor(np.stack(labels), dtype=torch.long)
    return x, y


def train_linear_probe(
    model: VoxelPairModel,
    dataset: list[LabeledVolume],
    num_classes: int,
    patch_size,
    cfg: DownstreamConfig,
) -> LinearHead:
    """Fit only the linear head on frozen backbone features (cross-entropy)."""
    head = LinearHead(model.config.level_channels, num_classes, seed=cfg.seed)
    optimizer = torch.optim.Adam(head.parameters(), lr=3e-4)
    model.eval()
    for step in range(1, cfg.steps + 1):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[cfg.seed, 7001, step])
        )
        x, y = _sample_labeled_batch(dataset, patch_size, cfg.patches_per_step, rng)
        with torch.no_grad():
            levels = model.pyramid(x)
        logits = head([lvl.detach() for lvl in levels])
        loss = F.cross_entropy(logits, y)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return head


def finetune(
    model: VoxelPairModel,
    dataset: list[LabeledVolume],
    num_classes: int,
    patch_size,
    cfg: DownstreamConfig,
    schedule: FinetuneSchedule | None,
) -> NonlinearHead:
    """Train the nonlinear head (and, per schedule, the backbone) in place.

    schedule=None is the from-scratch regime: backbone and head train jointly
    at the head learning rate from the first step.
    """
    head = NonlinearHead(model.config.level_channels, num_classes, seed=cfg.seed)
    lr_head = schedule.lr_head if schedule is not None else 3e-4
    optimizer = torch.optim.Adam(
        [
            {"params": list(model.parameters()), "lr": 0.0 if schedule else lr_head},
            {"params": list(head.parameters()), "lr": lr_head},
        ]
    )
    for step in range(1, cfg.steps + 1):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[cfg.seed, 7002, step])
        )
        x, y = _sample_labeled_batch(dataset, patch_size, cfg.patches_per_step, rng)
        frozen = schedule is not None and step <= schedule.freeze_steps
        if schedule is not None:
            optimizer.param_groups[0]["lr"] = schedule.backbone_lr(step)
        if frozen:
            with torch.no_grad():
                levels = model.pyramid(x)
            levels = [lvl.detach() for lvl in levels]
        else:
            levels = model.pyramid(x)
        loss = F.cross_entropy(head(levels), y)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return head


def _window_origins(dim: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


def predict_labels(
    model: VoxelPairModel, head: nn.Module, volume_data: np.ndarray, patch_size, num_classes: int
) -> np.ndarray:
    """Sliding-window inference with 50% overlap and logit averaging."""
    shape = volume_data.shape
    if any(shape[i] < patch_size[i] for i in range(3)):
        raise ValueError(f"volume {shape} smaller than inference patch {tuple(patch_size)}")
    logit_sum = np.zeros((num_classes, *shape), dtype=np.float64)
    coverage = np.zeros(shape, dtype=np.float64)
    origins = [
        (z, y, x)
        for z in _window_origins(shape[0], patch_size[0], patch_size[0] // 2)
        for y in _window_origins(shape[1], patch_size[1], patch_size[1] // 2)
        for x in _window_origins(shape[2], patch_size[2], patch_size[2] // 2)
    ]
    model.eval()
    with torch.no_grad():
        for chunk_start in range(0, len(origins), 4):
            chunk = origins[chunk_start:chunk_start + 4]
            windows = np.stack(
                [
                    volume_data[o[0]:o[0] + patch_size[0], o[1]:o[1] + patch_size[1], o[2]:o[2] + patch_size[2]]
                    for o in chunk
                ]
            )
            x = torch.as_tensor(windows, dtype=torch.float32)[:, None]
            logits = head(model.pyramid(x)).double().numpy()
            for b, o in enumerate(chunk):
                sl = tuple(slice(o[i], o[i] + patch_size[i]) for i in range(3))
                logit_sum[(slice(None),) + sl] += logits[b]
                coverage[sl] += 1.0
    return (logit_sum / coverage).argmax(axis=0).astype(np.uint8)


def dice_score(pred_labels: np.ndarray, true_labels: np.ndarray, num_classes: int) -> DiceResult:
    """Per-foreground-class Dice; classes absent from both sides are excluded."""
    if pred_labels.shape != true_labels.shape:
        raise ValueError(
            f"shape mismatch: pred {pred_labels.shape} vs true {true_labels.shape}"
        )
    per_class: dict[int, float] = {}
    for c in range(1, num_classes):
        p = pred_labels == c
        t = true_labels == c
        p_size, t_size = int(p.sum()), int(t.sum())
        if p_size + t_size == 0:
            continue
        per_class[c] = 2.0 * int((p & t).sum()) / (p_size + t_size)
    overall = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return DiceResult(per_class, overall)


def evaluate_volumes(
    model, head, cases: list[LabeledVolume], patch_size, num_classes: int
) -> list[DiceResult]:
    out = []
    for lv in cases:
        pred = predict_labels(model, head, lv.volume.data, patch_size, num_classes)
        out.append(dice_score(pred, lv.labels, num_classes))
    return out


def aggregate_dice(results: list[DiceResult], num_classes: int) -> DiceResult:
    """Fold-level aggregation: per-class mean over scoreable volumes, then the
    overall is the mean over foreground per-class means."""
    per_class = {}
    for c in range(1, num_classes):
        vals = [r.per_class[c] for r in results if c in r.per_class]
        if vals:
            per_class[c] = float(np.mean(vals))
    overall = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return DiceResult(per_class, overall)


def fold_assignments(n_cases: int, k_folds: int, seed: int) -> list[list[int]]:
    """Deterministic shuffled split into k near-equal folds."""
    if k_folds < 2:
        raise ValueError("k_folds must be >= 2")
    if n_cases < k_folds:
        raise ValueError(f"cannot split {n_cases} cases into {k_folds} folds")
    order = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 9001])).permutation(
        n_cases
    )
    return [sorted(int(i) for i in order[f::k_folds]) for f in range(k_folds)]


def _build_eval_model(
    pyramid_cfg: PyramidConfig, checkpoint_path, seed: int
) -> VoxelPairModel:
    model = build_model(pyramid_cfg, seed=seed)
    if checkpoint_path is not None:
        _, _, params, _ = read_checkpoint(Path(checkpoint_path))
        load_parameters(model, params)
    return model


def evaluate_protocol(
    dataset: list[LabeledVolume],
    num_classes: int,
    k_folds: int,
    mode: str,
    pyramid_cfg: PyramidConfig,
    patch_size,
    cfg: DownstreamConfig,
    checkpoint_path=None,
    schedule: FinetuneSchedule | None = None,
) -> dict:
    """Cross-validated evaluation; returns a JSON-ready report.

    mode: "linear" (frozen backbone + linear head), "finetune" (freeze/ramp
    schedule), or "scratch" (random init, joint training).
    """
    if mode not in ("linear", "finetune", "scratch"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("linear", "finetune") and checkpoint_path is None:
        raise ValueError(f"mode {mode!r} requires a pretraining checkpoint")
    folds = fold_assignments(len(dataset), k_folds, cfg.seed)
    fold_reports = []
    for f, eval_idx in enumerate(folds):
        train_cases = [dataset[i] for i in range(len(dataset)) if i not in eval_idx]
        eval_cases = [dataset[i] for i in eval_idx]
        # the fold index enters only through its data: identical folds must
        # score identically (std 0), so the seed is shared across folds
        model = _build_eval_model(
            pyramid_cfg, checkpoint_path if mode != "scratch" else None, seed=cfg.seed
        )
        if mode == "linear":
            head = train_linear_probe(model, train_cases, num_classes, patch_size, cfg)
        else:
            head = finetune(
                model,
                train_cases,
                num_classes,
                patch_size,
                cfg,
                schedule if mode == "finetune" else None,
            )
        volume_results = evaluate_volumes(model, head, eval_cases, patch_size, num_classes)
        agg = aggregate_dice(volume_results, num_classes)
        fold_reports.append(
            {
                "fold": f,
                "eval_cases": eval_idx,
                "per_class": {f"class{c}": v for c, v in agg.per_class.items()},
                "overall": agg.overall,
                "volumes": [
                    {
                        "case": idx,
                        "per_class": {f"class{c}": v for c, v in r.per_class.items()},
                        "overall": r.overall,
                    }
                    for idx, r in zip(eval_idx, volume_results)
                ],
            }
        )
    overalls = [fr["overall"] for fr in fold_reports]
    return {
        "mode": mode,
        "k_folds": k_folds,
        "folds": fold_reports,
        "mean_overall": float(np.mean(overalls)),
        "std_overall": float(np.std(overalls)),
    }
