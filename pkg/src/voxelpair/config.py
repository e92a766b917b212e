"""Run configuration: one YAML key/value tree validated as a whole.

Top-level sections: seed, paths, trainer, augment, pyramid, loss, finetune,
downstream, ablation. Unknown keys are rejected at every nesting level and
the offending path is named. Overrides use dotted paths with YAML-parsed
values, e.g. ``trainer.steps=10`` or ``trainer.patch_size=[16,16,16]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentationSpec, InpaintSpec, IntensitySpec, ShuffleSpec
from .backbone import PyramidConfig
from .downstream import DownstreamConfig, FinetuneSchedule
from .objectives import LossConfig
from .trainer import AblationConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration; the message names the field."""


@dataclass
class PathsConfig:
    data: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    finetune: FinetuneSchedule = field(default_factory=FinetuneSchedule)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


def _pop_section(raw: dict, name: str) -> dict:
    section = raw.pop(name, None) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    return dict(section)


def _build(cls, data: dict, path: str, aliases: dict[str, str] | None = None, casts=None):
    kwargs = {}
    aliases = aliases or {}
    casts = casts or {}
    for yaml_key in list(data):
        attr = aliases.get(yaml_key, yaml_key)
        if attr not in cls.__dataclass_fields__:
            raise ConfigError(f"unknown config key '{path}.{yaml_key}'")
        value = data.pop(yaml_key)
        if attr in casts:
            value = casts[attr](value)
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under '{path}': {exc}") from exc


def run_config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    seed = raw.pop("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("'seed' must be a non-negative integer")

    paths = _build(PathsConfig, _pop_section(raw, "paths"), "paths")

    trainer_data = _pop_section(raw, "trainer")
    trainer_data.setdefault("seed", seed)
    trainer = _build(TrainConfig, trainer_data, "trainer", casts={"patch_size": tuple})

    aug_data = _pop_section(raw, "augment")
    as_range = lambda v: tuple(int(x) for x in v)
    shuffle = _build(
        ShuffleSpec, _pop_section(aug_data, "shuffle"), "augment.shuffle",
        casts={"block_size_range": as_range},
    )
    inpaint = _build(
        InpaintSpec, _pop_section(aug_data, "inpaint"), "augment.inpaint",
        casts={"region_size_range": as_range},
    )
    intensity = _build(IntensitySpec, _pop_section(aug_data, "intensity"), "augment.intensity")
    if aug_data:
        raise ConfigError(f"unknown config key 'augment.{sorted(aug_data)[0]}'")
    augment = AugmentationSpec(shuffle=shuffle, inpaint=inpaint, intensity=intensity, seed=seed)

    pyramid = _build(PyramidConfig, _pop_section(raw, "pyramid"), "pyramid")
    loss = _build(LossConfig, _pop_section(raw, "loss"), "loss", aliases={"lambda": "lam"})
    finetune = _build(FinetuneSchedule, _pop_section(raw, "finetune"), "finetune")
    downstream_data = _pop_section(raw, "downstream")
    downstream_data.setdefault("seed", seed)
    downstream = _build(DownstreamConfig, downstream_data, "downstream")
    ablation = _build(AblationConfig, _pop_section(raw, "ablation"), "ablation")

    if raw:
        raise ConfigError(f"unknown config key '{sorted(raw)[0]}'")
    return RunConfig(
        seed=seed,
        paths=paths,
        trainer=trainer,
        augment=augment,
        pyramid=pyramid,
        loss=loss,
        finetune=finetune,
        downstream=downstream,
        ablation=ablation,
    )


def run_config_to_dict(cfg: RunConfig) -> dict:
    """Canonical plain-dict form, the exact inverse of run_config_from_dict."""
    return {
        "seed": cfg.seed,
        "paths": {"data": cfg.paths.data, "out": cfg.paths.out},
        "trainer": {
            "steps": cfg.trainer.steps,
            "pairs_per_batch": cfg.trainer.pairs_per_batch,
            "voxels_per_pair": cfg.trainer.voxels_per_pair,
            "lr": cfg.trainer.lr,
            "optimizer": cfg.trainer.optimizer,
            "seed": cfg.trainer.seed,
            "checkpoint_every": cfg.trainer.checkpoint_every,
            "patch_size": list(cfg.trainer.patch_size),
            "min_overlap_fraction": cfg.trainer.min_overlap_fraction,
        },
        "augment": {
            "shuffle": {
                "num_blocks": cfg.augment.shuffle.num_blocks,
                "block_size_range": list(cfg.augment.shuffle.block_size_range),
                "probability": cfg.augment.shuffle.probability,
            },
            "inpaint": {
                "num_regions": cfg.augment.inpaint.num_regions,
                "region_size_range": list(cfg.augment.inpaint.region_size_range),
                "fill": cfg.augment.inpaint.fill,
                "fill_value": cfg.augment.inpaint.fill_value,
                "probability": cfg.augment.inpaint.probability,
            },
            "intensity": {
                "num_control_points": cfg.augment.intensity.num_control_points,
                "probability": cfg.augment.intensity.probability,
            },
        },
        "pyramid": {
            "num_scales": cfg.pyramid.num_scales,
            "base_channels": cfg.pyramid.base_channels,
            "proj_channels": cfg.pyramid.proj_channels,
            "embed_dim": cfg.pyramid.embed_dim,
        },
        "loss": {"tau": cfg.loss.tau, "lambda": cfg.loss.lam},
        "finetune": {
            "freeze_steps": cfg.finetune.freeze_steps,
            "ramp_steps": cfg.finetune.ramp_steps,
            "lr_backbone_start": cfg.finetune.lr_backbone_start,
            "lr_backbone_end": cfg.finetune.lr_backbone_end,
            "lr_head": cfg.finetune.lr_head,
        },
        "downstream": {
            "steps": cfg.downstream.steps,
            "patches_per_step": cfg.downstream.patches_per_step,
            "seed": cfg.downstream.seed,
        },
        "ablation": {
            "augment": cfg.ablation.augment,
            "contrastive": cfg.ablation.contrastive,
            "restorative": cfg.ablation.restorative,
            "rebalanced_arch": cfg.ablation.rebalanced_arch,
        },
    }


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one 'dotted.path=value' override in place; the value is YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' must look like key.path=value")
    dotted, text = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigError(f"override '{assignment}' has an empty path segment")
    node = raw
    for key in keys[:-1]:
        nxt = node.setdefault(key, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override path '{dotted}' crosses non-mapping key '{key}'")
        node = nxt
    try:
        node[keys[-1]] = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override value for '{dotted}' is not valid YAML: {exc}") from exc


def load_run_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    for assignment in overrides or []:
        apply_override(raw, assignment)
    return run_config_from_dict(raw)


def save_resolved_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(run_config_to_dict(cfg), sort_keys=False))
