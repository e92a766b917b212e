"""Balanced feature-pyramid backbone and its projection/reconstruction heads.

Encoder widths double at each downsampling (base * 2^s at scale s), so the raw
pyramid F is channel-imbalanced across scales; per-scale 1x1x1 projections map
every level to the same channel count, giving the balanced pyramid J whose
concatenated per-voxel vectors weight all scales equally.

Activations are GELU and blocks are norm-free so analytic gradients stay
finite-difference checkable; full-resolution layers are kept to a minimum
(they dominate CPU cost).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

NORM_EPS = 1e-12


@dataclass
class PyramidConfig:
    num_scales: int = 4
    base_channels: int = 16
    proj_channels: int = 16
    embed_dim: int = 64

    def __post_init__(self):
        if self.num_scales < 2:
            raise ValueError("num_scales must be >= 2")
        if min(self.base_channels, self.proj_channels, self.embed_dim) < 1:
            raise ValueError("channel counts and embed_dim must be positive")

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * 2**s for s in range(self.num_scales)]

    @property
    def representation_length(self) -> int:
        return self.num_scales * self.proj_channels


@dataclass
class FeaturePyramid:
    """Per-scale feature grids, finest first; spatial dims halve per level."""

    levels: list[torch.Tensor]

    def __post_init__(self):
        for s in range(1, len(self.levels)):
            prev, cur = self.levels[s - 1].shape[-3:], self.levels[s].shape[-3:]
            if tuple(cur) != tuple(p // 2 for p in prev):
                raise ValueError(f"level {s} shape {cur} does not halve {prev}")

    def __len__(self):
        return len(self.levels)


class _ResidualBlock(nn.Module):
    """Pre-activation, norm-free: x + conv3(gelu(x))."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv(F.gelu(x))


class _Fpn(nn.Module):
    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        chs = cfg.level_channels
        self.stem = nn.Conv3d(1, chs[0], 3, padding=1)
        self.down = nn.ModuleList(
            nn.Conv3d(chs[s], chs[s + 1], 2, stride=2) for s in range(cfg.num_scales - 1)
        )
        self.block = nn.ModuleList(_ResidualBlock(chs[s + 1]) for s in range(cfg.num_scales - 1))
        self.reduce = nn.ModuleList(
            nn.Conv3d(chs[s + 1], chs[s], 1) for s in range(cfg.num_scales - 1)
        )
        self.smooth = nn.ModuleList(
            nn.Conv3d(chs[s], chs[s], 3, padding=1) for s in range(cfg.num_scales - 1)
        )

    def forward(self, x) -> list[torch.Tensor]:
        encs = [self.stem(x)]
        for down, block in zip(self.down, self.block):
            encs.append(block(down(F.gelu(encs[-1]))))
        levels = [None] * len(encs)
        levels[-1] = encs[-1]
        for s in range(len(encs) - 2, -1, -1):
            up = F.interpolate(self.reduce[s](levels[s + 1]), scale_factor=2, mode="nearest")
            levels[s] = self.smooth[s](encs[s] + up)
        return levels


class _ScaleProjections(nn.Module):
    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        self.scale = nn.ModuleDict(
            {f"s{s}": nn.Conv3d(ch, cfg.proj_channels, 1) for s, ch in enumerate(cfg.level_channels)}
        )

    def forward(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        return [self.scale[f"s{s}"](lvl) for s, lvl in enumerate(levels)]


class _ProjectionHead(nn.Module):
    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.representation_length, cfg.embed_dim)
        self.fc2 = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.fc3 = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def forward(self, j):
        return self.fc3(F.gelu(self.fc2(F.gelu(self.fc1(j)))))


class _ReconstructionHead(nn.Module):
    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        mid = max(cfg.base_channels // 2, 2)
        self.conv1 = nn.Conv3d(cfg.base_channels, mid, 3, padding=1)
        self.conv2 = nn.Conv3d(mid, 1, 1)

    def forward(self, finest):
        return self.conv2(F.gelu(self.conv1(finest)))


def _deterministic_init(module: nn.Module, seed: int) -> None:
    """Uniform(+/- 1/sqrt(fan_in)) for weights and biases, from a private rng.

    Independent of torch's global rng state; random (not zero) biases keep the
    projection-head output norms away from the degenerate origin at init.
    """
    g = torch.Generator().manual_seed(seed & 0x7FFFFFFF)
    for name, m in sorted(module.named_modules()):
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            bound = 1.0 / float(m.weight[0].numel()) ** 0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=g)


class VoxelPairModel(nn.Module):
    """FPN backbone + balancing projections + projection head + recon head."""

    def __init__(self, config: PyramidConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.fpn = _Fpn(config)
        self.proj = _ScaleProjections(config)
        self.head = _ProjectionHead(config)
        self.recon = _ReconstructionHead(config)
        self._init_parameters(seed)

    def _init_parameters(self, seed: int):
        _deterministic_init(self, seed)

    def check_patch_shape(self, shape):
        divisor = 2 ** (self.config.num_scales - 1)
        if any(int(d) % divisor for d in shape):
            raise ValueError(
                f"patch shape {tuple(shape)} not divisible by 2^(num_scales-1)={divisor}"
            )

    def pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Batched raw pyramid: (B,1,D,H,W) -> [(B, base*2^s, D/2^s, ...)]."""
        self.check_patch_shape(x.shape[-3:])
        return self.fpn(x)

    def balanced(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        return self.proj(levels)


def build_model(config: PyramidConfig, seed: int = 0) -> VoxelPairModel:
    return VoxelPairModel(config, seed)


def _as_single_patch(patch) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(patch)) if not isinstance(patch, torch.Tensor) else patch
    if t.ndim != 3:
        raise ValueError(f"expected a 3D patch, got shape {tuple(t.shape)}")
    return t


def fpn_forward(model: VoxelPairModel, patch) -> FeaturePyramid:
    """Raw feature pyramid of one patch: levels (C_s, D/2^s, H/2^s, W/2^s)."""
    t = _as_single_patch(patch).to(next(model.parameters()).dtype)
    levels = model.pyramid(t[None, None])
    return FeaturePyramid([lvl[0] for lvl in levels])


def project_scales(model: VoxelPairModel, pyramid: FeaturePyramid) -> FeaturePyramid:
    """Balance the pyramid: every level mapped to proj_channels channels."""
    return FeaturePyramid([lvl[0] for lvl in model.balanced([l[None] for l in pyramid.levels])])


def gather_voxel_reps(pyramid, coords) -> torch.Tensor:
    """Concatenate per-scale feature vectors at floor(coord / 2^s), finest first.

    Accepts a FeaturePyramid or list of levels; levels (C,D,H,W) with coords
    (n,3), or batched (B,C,D,H,W) with coords (B,n,3).
    """
    levels = pyramid.levels if isinstance(pyramid, FeaturePyramid) else pyramid
    coords = torch.as_tensor(np.asarray(coords), dtype=torch.long)
    batched = levels[0].ndim == 5
    finest = levels[0].shape[-3:]
    if (coords < 0).any() or (coords >= torch.tensor(finest)).any():
        raise ValueError("voxel coordinate outside patch bounds")
    parts = []
    for s, lvl in enumerate(levels):
        c = coords >> s
        if batched:
            b_idx = torch.arange(lvl.shape[0])[:, None]
            parts.append(lvl[b_idx, :, c[..., 0], c[..., 1], c[..., 2]])
        else:
            parts.append(lvl[:, c[:, 0], c[:, 1], c[:, 2]].T)
    return torch.cat(parts, dim=-1)


def normalize_embedding(h: torch.Tensor) -> torch.Tensor:
    """z = h / ||h||, with an epsilon inside the norm guarding zero vectors."""
    return h / torch.sqrt((h * h).sum(dim=-1, keepdim=True) + NORM_EPS)


def projection_head(model: VoxelPairModel, j) -> tuple[torch.Tensor, torch.Tensor]:
    """Map voxel representations to the latent space: h = MLP(j), z = h/||h||."""
    j = torch.as_tensor(np.asarray(j)) if not isinstance(j, torch.Tensor) else j
    expected = model.config.representation_length
    if j.shape[-1] != expected:
        raise ValueError(f"representation length {j.shape[-1]}, expected {expected}")
    h = model.head(j.to(next(model.parameters()).dtype))
    return h, normalize_embedding(h)


def reconstruct_head(model: VoxelPairModel, finest) -> torch.Tensor:
    """Two-conv reconstruction of the patch from the finest (unbalanced) level."""
    t = finest if isinstance(finest, torch.Tensor) else torch.as_tensor(np.asarray(finest))
    if t.ndim == 4:
        return model.recon(t[None])[0, 0]
    return model.recon(t)
