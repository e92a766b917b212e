"""Pretraining loop: pair assembly, hybrid-loss step, checkpointing, metrics.

Every pair's data stream is derived from (global seed, step, pair index), so
batches are identical no matter how many workers prepare them and a resumed
run regenerates exactly the data it would have seen.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationSpec, AugmentedPatch, compose
from .backbone import PyramidConfig, VoxelPairModel, build_model, gather_voxel_reps, normalize_embedding
from .checkpoint import load_adam_state, load_parameters, read_checkpoint, save_checkpoint
from .objectives import LossConfig, LossReport, info_nce, mse_recon
from .patchpair import PatchPair, VoxelBatch, sample_patch_pair, sample_positive_pairs
from .volio import Volume

CHECKPOINT_PREFIX = "ckpt_step_"
METRICS_NAME = "metrics.jsonl"


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    pairs_per_batch: int = 2
    voxels_per_pair: int = 256
    lr: float = 3e-4
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 500
    patch_size: tuple[int, int, int] = (32, 32, 32)
    min_overlap_fraction: float = 0.25

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.steps < 1:
            raise ValueError("trainer.steps must be >= 1")
        if self.voxels_per_pair < 2:
            raise ValueError("trainer.voxels_per_pair must be >= 2 (negatives require it)")
        if self.pairs_per_batch < 1:
            raise ValueError("trainer.pairs_per_batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("trainer.lr must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"trainer.optimizer must be 'adam', got {self.optimizer!r}")
        if self.seed < 0:
            raise ValueError("trainer.seed must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError("trainer.checkpoint_every must be >= 1")
        if len(self.patch_size) != 3 or min(self.patch_size) < 2:
            raise ValueError("trainer.patch_size must be 3 ints >= 2")
        if not 0 < self.min_overlap_fraction <= 1:
            raise ValueError("trainer.min_overlap_fraction must be in (0, 1]")


@dataclass
class AblationConfig:
    """Structural switches mirroring the ablation grid: augmentations,
    contrastive term, restorative term, rebalanced architecture."""

    augment: bool = True
    contrastive: bool = True
    restorative: bool = True
    rebalanced_arch: bool = True

    def __post_init__(self):
        if not (self.contrastive or self.restorative):
            raise ValueError("at least one loss term must be enabled")


# depth/width delta of the rebalancing: the baseline is one level deeper and
# half as wide, the rebalanced variant trades that depth for doubled widths
BASELINE_ARCH = {"num_scales": 5, "base_channels": 8}


def pyramid_config_for(ablation: AblationConfig, base: PyramidConfig) -> PyramidConfig:
    if ablation.rebalanced_arch:
        return base
    return PyramidConfig(
        num_scales=BASELINE_ARCH["num_scales"],
        base_channels=BASELINE_ARCH["base_channels"],
        proj_channels=base.proj_channels,
        embed_dim=base.embed_dim,
    )


def architecture_from_snapshot(snapshot: dict) -> PyramidConfig:
    """Recover the backbone architecture recorded in a checkpoint's config,
    honoring the run's ablation flags when present."""
    pyr = (snapshot or {}).get("pyramid") or {}
    base = PyramidConfig(**pyr)
    abl = (snapshot or {}).get("ablation")
    if abl:
        return pyramid_config_for(AblationConfig(**abl), base)
    return base


@dataclass
class StepRecord:
    step: int
    loss: LossReport
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "l_c": self.loss.l_c,
                "l_r": self.loss.l_r,
                "l_total": self.loss.l_total,
                "wall_ms": round(self.wall_ms, 3),
            }
        )


@dataclass
class PairSample:
    pair: PatchPair
    aug_a: AugmentedPatch
    aug_b: AugmentedPatch
    voxels: VoxelBatch


def worker_count() -> int:
    env = os.environ.get("VOXELPAIR_THREADS")
    if env:
        return max(1, int(env))
    return min(2, os.cpu_count() or 1)


def assemble_pair(
    volumes: list[Volume],
    step: int,
    pair_idx: int,
    cfg: TrainConfig,
    aug_spec: AugmentationSpec,
    augment_on: bool,
) -> PairSample:
    """Build one pair's training sample; a pure function of (seed, step, pair)."""
    ss = np.random.SeedSequence(entropy=[cfg.seed, step, pair_idx])
    rng_crop, rng_voxels, rng_a, rng_b = (np.random.default_rng(c) for c in ss.spawn(4))
    volume = volumes[int(rng_crop.integers(len(volumes)))]
    pair = sample_patch_pair(volume, cfg.patch_size, cfg.min_overlap_fraction, rng_crop)
    voxels = sample_positive_pairs(pair, cfg.voxels_per_pair, rng_voxels)
    if augment_on:
        aug_a = compose(pair.patch_a, aug_spec, rng_a)
        aug_b = compose(pair.patch_b, aug_spec, rng_b)
    else:
        aug_a = AugmentedPatch(pair.patch_a.copy(), np.zeros(pair.patch_a.shape, dtype=bool))
        aug_b = AugmentedPatch(pair.patch_b.copy(), np.zeros(pair.patch_b.shape, dtype=bool))
    return PairSample(pair, aug_a, aug_b, voxels)


def assemble_batch(
    volumes, step, cfg: TrainConfig, aug_spec, augment_on, pool: ThreadPoolExecutor | None = None
) -> list[PairSample]:
    indices = range(cfg.pairs_per_batch)
    build = lambda p: assemble_pair(volumes, step, p, cfg, aug_spec, augment_on)
    if pool is None:
        return [build(p) for p in indices]
    return list(pool.map(build, indices))


def batch_loss(
    model: VoxelPairModel,
    batch: list[PairSample],
    loss_cfg: LossConfig,
    ablation: AblationConfig,
) -> tuple[torch.Tensor, LossReport]:
    """Forward both patches of every pair and combine the hybrid objective.

    Eq-style composition: InfoNCE per pair averaged over pairs, reconstruction
    MSE per pair (against unaugmented crops) averaged over pairs, total
    l_c + lambda * l_r.
    """
    dtype = next(model.parameters()).dtype
    x_aug = torch.stack(
        [torch.as_tensor(s, dtype=dtype) for ps in batch for s in (ps.aug_a.data, ps.aug_b.data)]
    )[:, None]
    levels = model.pyramid(x_aug)

    zero = torch.zeros((), dtype=dtype)
    l_c = zero
    if ablation.contrastive:
        coords = np.stack([c for ps in batch for c in (ps.voxels.coords_a, ps.voxels.coords_b)])
        j = gather_voxel_reps(model.balanced(levels), coords)
        z = normalize_embedding(model.head(j))
        terms = [info_nce(z[2 * p], z[2 * p + 1], loss_cfg.tau) for p in range(len(batch))]
        l_c = torch.stack(terms).mean()

    l_r = zero
    if ablation.restorative:
        xhat = model.recon(levels[0])[:, 0]
        terms = []
        for p, ps in enumerate(batch):
            clean_a = torch.as_tensor(ps.pair.patch_a, dtype=dtype)
            clean_b = torch.as_tensor(ps.pair.patch_b, dtype=dtype)
            terms.append(mse_recon(clean_a, xhat[2 * p], clean_b, xhat[2 * p + 1]))
        l_r = torch.stack(terms).mean()

    lam = loss_cfg.lam if ablation.restorative else 0.0
    total = l_c + lam * l_r
    return total, LossReport.build(float(l_c.detach()), float(l_r.detach()), lam)


def pretrain_step(
    model: VoxelPairModel,
    optimizer: torch.optim.Optimizer,
    batch: list[PairSample],
    loss_cfg: LossConfig,
    ablation: AblationConfig,
    step: int,
) -> StepRecord:
    t0 = time.perf_counter()
    total, report = batch_loss(model, batch, loss_cfg, ablation)
    if not torch.isfinite(total):
        raise NonFiniteLossError(step, f"non-finite loss l_c={report.l_c} l_r={report.l_r}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepRecord(step, report, (time.perf_counter() - t0) * 1000)


def make_optimizer(model: VoxelPairModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr)


def latest_checkpoint(out_dir: Path) -> Path | None:
    candidates = sorted(Path(out_dir).glob(f"{CHECKPOINT_PREFIX}*.ckpt"))
    return candidates[-1] if candidates else None


def _checkpoint_path(out_dir: Path, step: int) -> Path:
    return Path(out_dir) / f"{CHECKPOINT_PREFIX}{step:07d}.ckpt"


def run_pretraining(
    volumes: list[Volume],
    pyramid_cfg: PyramidConfig,
    train_cfg: TrainConfig,
    aug_spec: AugmentationSpec,
    loss_cfg: LossConfig,
    ablation: AblationConfig,
    out_dir,
    config_snapshot: dict | None = None,
    log_every: int = 0,
) -> Path:
    """Run (or resume) pretraining; returns the final checkpoint path.

    Writes one JSON line per step to metrics.jsonl and checkpoints atomically
    every checkpoint_every steps and at termination. Resuming from the latest
    checkpoint reproduces the uninterrupted run bit for bit.
    """
    if not volumes:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = config_snapshot or {}

    arch = pyramid_config_for(ablation, pyramid_cfg)
    model = build_model(arch, seed=train_cfg.seed)
    optimizer = make_optimizer(model, train_cfg)
    start_step = 0
    resume = latest_checkpoint(out_dir)
    if resume is not None:
        _, meta, params, opt_entries = read_checkpoint(resume)
        load_parameters(model, params)
        load_adam_state(optimizer, model, opt_entries)
        start_step = int(meta["step"])
        if start_step > train_cfg.steps:
            raise ValueError(
                f"resume checkpoint is at step {start_step}, beyond trainer.steps={train_cfg.steps}"
            )

    metrics_path = out_dir / METRICS_NAME
    threads = worker_count()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    final_path = _checkpoint_path(out_dir, train_cfg.steps)
    try:
        with open(metrics_path, "a") as metrics:
            for step in range(start_step + 1, train_cfg.steps + 1):
                batch = assemble_batch(
                    volumes, step, train_cfg, aug_spec, ablation.augment, pool
                )
                try:
                    record = pretrain_step(model, optimizer, batch, loss_cfg, ablation, step)
                except NonFiniteLossError as err:
                    metrics.write(
                        json.dumps({"step": step, "error": str(err), "l_total": None}) + "\n"
                    )
                    raise
                metrics.write(record.to_json() + "\n")
                if log_every and step % log_every == 0:
                    per_anchor = record.loss.l_c / max(train_cfg.voxels_per_pair, 1)
                    print(
                        f"step {step}/{train_cfg.steps} "
                        f"l_total={record.loss.l_total:.4f} l_c/anchor={per_anchor:.4f} "
                        f"l_r={record.loss.l_r:.5f}",
                        flush=True,
                    )
                if step % train_cfg.checkpoint_every == 0 or step == train_cfg.steps:
                    save_checkpoint(
                        _checkpoint_path(out_dir, step), snapshot, model, step, optimizer
                    )
    finally:
        if pool is not None:
            pool.shutdown()
    if not final_path.exists():
        save_checkpoint(final_path, snapshot, model, train_cfg.steps, optimizer)
    return final_path


def read_metrics(out_dir) -> list[dict]:
    path = Path(out_dir) / METRICS_NAME
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def moving_average(values: list[float], index: int, window: int = 20) -> float:
    """Mean of values[max(0, index-window):index]; index is 1-based step count."""
    lo = max(0, index - window)
    chunk = values[lo:index]
    return float(np.mean(chunk))
